"""Exact and reference optimal-transport solvers.

These are the ground truth every trained estimate is checked against at
small scale: the 1-d quantile coupling (exact for convex costs), the
Hungarian assignment solver (exact for uniform empirical marginals), a
Sinkhorn solver for entropy-regularized plans, and the closed-form W1 for
translated distributions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConvergenceError, DistributionError, ShapeError

SINKHORN_LOG_DOMAIN_THRESHOLD = 0.05  # below this, scaling underflows; switch to log domain


@dataclass
class DiscreteOt:
    """Discrete OT instance: cost matrix plus marginal weights summing to 1."""

    cost: np.ndarray
    a: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.cost = np.asarray(self.cost, dtype=np.float64)
        self.a = np.asarray(self.a, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)
        n, m = self.cost.shape
        if self.a.shape != (n,) or self.b.shape != (m,):
            raise ShapeError(f"marginals {self.a.shape}/{self.b.shape} do not match cost {self.cost.shape}")
        if not np.all(np.isfinite(self.cost)):
            raise DistributionError("cost matrix must be finite")
        if np.any(self.a < 0) or np.any(self.b < 0):
            raise DistributionError("marginal weights must be nonnegative")
        for name, w in (("a", self.a), ("b", self.b)):
            if abs(w.sum() - 1.0) > 1e-12:
                raise DistributionError(f"marginal {name} sums to {w.sum()}, expected 1")

    @classmethod
    def uniform(cls, cost: np.ndarray) -> "DiscreteOt":
        cost = np.asarray(cost, dtype=np.float64)
        n, m = cost.shape
        return cls(cost, np.full(n, 1.0 / n), np.full(m, 1.0 / m))


def ot_1d_quantile(x_samples: np.ndarray, y_samples: np.ndarray, p: int = 1) -> float:
    """Exact 1-d OT cost for |x-y|^p under uniform weights: pair sorted samples by rank."""
    x = np.sort(np.asarray(x_samples, dtype=np.float64).reshape(-1))
    y = np.sort(np.asarray(y_samples, dtype=np.float64).reshape(-1))
    if x.size != y.size:
        raise ShapeError(f"quantile coupling needs equal counts, got {x.size} and {y.size}")
    if p not in (1, 2):
        raise ShapeError(f"cost exponent must be 1 or 2, got {p}")
    d = np.abs(x - y)
    return float(np.mean(d if p == 1 else d * d))


def assignment_exact(cost_matrix: np.ndarray) -> tuple[float, np.ndarray]:
    """Hungarian algorithm (shortest augmenting paths with potentials), O(n^3).

    Returns (minimal mean assignment cost, permutation) with perm[row] = column.
    Square matrices only, n <= 512 by contract.
    """
    c = np.asarray(cost_matrix, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise ShapeError(f"assignment needs a square matrix, got {c.shape}")
    n = c.shape[0]
    if n > 512:
        raise ShapeError(f"assignment solver capped at 512, got {n}")

    # 1-based arrays; column 0 is the virtual start column, p[j]=0 means free.
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, np.inf)
        used = np.zeros(n + 1, dtype=bool)
        used[0] = False
        while True:
            used[j0] = True
            i0 = p[j0]
            cur = c[i0 - 1, :] - u[i0] - v[1:]
            free = ~used[1:]
            improve = free & (cur < minv[1:])
            minv[1:][improve] = cur[improve]
            way[1:][improve] = j0
            masked = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            u[p[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0 != 0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1

    perm = np.zeros(n, dtype=np.int64)
    total = 0.0
    for j in range(1, n + 1):
        perm[p[j] - 1] = j - 1
        total += c[p[j] - 1, j - 1]
    return total / n, perm


def sinkhorn(problem: DiscreteOt, eps_reg: float, max_iters: int = 20_000,
             tol: float = 1e-9) -> tuple[np.ndarray, float]:
    """Entropy-regularized plan via alternating scaling; log-domain below the
    underflow threshold. Returns (plan, regularized transport cost)."""
    if eps_reg <= 0:
        raise DistributionError(f"regularization must be positive, got {eps_reg}")
    c, a, b = problem.cost, problem.a, problem.b
    if eps_reg < SINKHORN_LOG_DOMAIN_THRESHOLD:
        plan = _sinkhorn_log(c, a, b, eps_reg, max_iters, tol)
    else:
        plan = _sinkhorn_scaling(c, a, b, eps_reg, max_iters, tol)
    return plan, float((plan * c).sum())


def _residual(plan: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    return max(float(np.max(np.abs(plan.sum(axis=1) - a))),
               float(np.max(np.abs(plan.sum(axis=0) - b))))


def _sinkhorn_scaling(c, a, b, eps, max_iters, tol):
    k = np.exp(-c / eps)
    u = np.ones_like(a)
    v = np.ones_like(b)
    for _ in range(max_iters):
        kv = k @ v
        u = np.divide(a, kv, out=np.zeros_like(a), where=kv > 0)
        ktu = k.T @ u
        v = np.divide(b, ktu, out=np.zeros_like(b), where=ktu > 0)
        plan = u[:, None] * k * v[None, :]
        if _residual(plan, a, b) < tol:
            return plan
    raise ConvergenceError(f"sinkhorn hit {max_iters} iterations",
                           residual=_residual(plan, a, b))


def _logsumexp(x, axis):
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    return np.squeeze(m, axis=axis) + np.log(np.sum(np.exp(x - m), axis=axis))


def _sinkhorn_log(c, a, b, eps, max_iters, tol):
    # Anneal from eps=1 down to the target (halving, warm-started potentials):
    # at very small eps the plain iteration loses its geometric rate entirely.
    with np.errstate(divide="ignore"):
        log_a, log_b = np.log(a), np.log(b)
    f = np.zeros_like(a)
    g = np.zeros_like(b)
    schedule = []
    e = 1.0
    while e > eps:
        schedule.append(e)
        e *= 0.5
    for e in schedule:
        for _ in range(200):
            f = e * log_a - e * _logsumexp((g[None, :] - c) / e, axis=1)
            g = e * log_b - e * _logsumexp((f[:, None] - c) / e, axis=0)
    for _ in range(max_iters):
        f = eps * log_a - eps * _logsumexp((g[None, :] - c) / eps, axis=1)
        g = eps * log_b - eps * _logsumexp((f[:, None] - c) / eps, axis=0)
        plan = np.exp((f[:, None] + g[None, :] - c) / eps)
        if _residual(plan, a, b) < tol:
            return plan
    raise ConvergenceError(f"sinkhorn(log) hit {max_iters} iterations",
                           residual=_residual(plan, a, b))


def gaussian_translation_w1(spec_a, spec_b) -> float:
    """W1 under Euclidean cost for translated identical shapes: the mean shift norm."""
    if not np.allclose(spec_a.cov, spec_b.cov, atol=1e-12):
        raise DistributionError("closed form requires equal covariances (translation case)")
    return float(np.linalg.norm(spec_a.mean - spec_b.mean))
