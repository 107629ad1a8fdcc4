"""Marginal and latent distributions: samplers, densities, empirical datasets.

Gaussian sampling goes through Box-Muller plus a Cholesky factor so draws are
reproducible bit-for-bit from the counter-based stream, with no dependence on
any library generator's internals.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import DatasetError, DistributionError
from .rng import Rng

__all__ = [
    "Rng", "GaussianSpec", "MixtureSpec", "CurveSpec", "EmpiricalDataset",
    "standard_latent", "sample", "pdf", "log_pdf", "minibatch",
    "load_csv", "save_binary", "load_binary",
]

_BINARY_MAGIC = b"SPOTDATA"


class GaussianSpec:
    """Multivariate normal given by mean and SPD covariance (scalar/diag/full accepted)."""

    def __init__(self, mean, cov):
        self.mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
        d = self.mean.shape[0]
        cov = np.asarray(cov, dtype=np.float64)
        if cov.ndim == 0:
            cov = np.eye(d) * float(cov)
        elif cov.ndim == 1:
            if cov.shape[0] != d:
                raise DistributionError(f"diagonal covariance length {cov.shape[0]} != dim {d}")
            cov = np.diag(cov)
        if cov.shape != (d, d):
            raise DistributionError(f"covariance shape {cov.shape} != ({d}, {d})")
        if not np.allclose(cov, cov.T, atol=1e-12):
            raise DistributionError("covariance must be symmetric")
        try:
            self.chol = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError as exc:
            raise DistributionError(f"covariance is not positive definite: {exc}") from exc
        self.cov = cov
        self._log_norm = -0.5 * (d * np.log(2.0 * np.pi)
                                 + 2.0 * np.sum(np.log(np.diag(self.chol))))

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    def sample(self, n: int, rng: Rng) -> np.ndarray:
        z = rng.normal(n * self.dim).reshape(n, self.dim)
        return z @ self.chol.T + self.mean

    def log_pdf(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        if x.shape[1] != self.dim:
            raise DistributionError(f"point dim {x.shape[1]} != spec dim {self.dim}")
        delta = x - self.mean
        y = np.linalg.solve(self.chol, delta.T).T
        return self._log_norm - 0.5 * np.einsum("ij,ij->i", y, y)

    def pdf(self, x: np.ndarray) -> np.ndarray:
        return np.exp(self.log_pdf(x))


class MixtureSpec:
    """Finite Gaussian mixture; weights positive and summing to 1 within 1e-12."""

    def __init__(self, components: list[tuple[float, GaussianSpec]]):
        if not components:
            raise DistributionError("mixture needs at least one component")
        self.weights = np.array([w for w, _ in components], dtype=np.float64)
        self.specs = [s for _, s in components]
        if np.any(self.weights <= 0.0) and not np.allclose(self.weights[self.weights <= 0], 0.0):
            raise DistributionError("mixture weights must be positive")
        if np.any(self.weights < 0.0):
            raise DistributionError("mixture weights must be nonnegative")
        if abs(self.weights.sum() - 1.0) > 1e-12:
            raise DistributionError(f"mixture weights sum to {self.weights.sum()}, expected 1")
        dims = {s.dim for s in self.specs}
        if len(dims) != 1:
            raise DistributionError("mixture components disagree on dimension")
        self._cumw = np.cumsum(self.weights)

    @property
    def dim(self) -> int:
        return self.specs[0].dim

    def sample(self, n: int, rng: Rng) -> np.ndarray:
        u = rng.uniform(n)
        idx = np.searchsorted(self._cumw, u, side="right")
        idx = np.minimum(idx, len(self.specs) - 1)
        z = rng.normal(n * self.dim).reshape(n, self.dim)
        chols = np.stack([s.chol for s in self.specs])[idx]
        means = np.stack([s.mean for s in self.specs])[idx]
        return np.einsum("nij,nj->ni", chols, z) + means

    def pdf(self, x: np.ndarray) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        out = np.zeros(x.shape[0])
        for w, s in zip(self.weights, self.specs):
            out += w * s.pdf(x)
        return out

    def log_pdf(self, x: np.ndarray) -> np.ndarray:
        p = self.pdf(x)
        if np.any(p <= 0.0):
            raise DistributionError("mixture pdf underflowed to zero at a query point")
        return np.log(p)


class CurveSpec:
    """2-d pushforward law (sin(t) + w, 2t - 3), t ~ U[lo, hi], w ~ N(noise_mean, noise_var).

    Sampler only; it has no tractable closed-form density.
    """

    def __init__(self, lo: float = 0.0, hi: float = 3.0,
                 noise_mean: float = 2.0, noise_var: float = 0.1):
        if hi <= lo or noise_var <= 0:
            raise DistributionError("curve spec requires hi > lo and positive noise variance")
        self.lo, self.hi = float(lo), float(hi)
        self.noise_mean, self.noise_var = float(noise_mean), float(noise_var)

    @property
    def dim(self) -> int:
        return 2

    def sample(self, n: int, rng: Rng) -> np.ndarray:
        t = self.lo + (self.hi - self.lo) * rng.uniform(n)
        w = self.noise_mean + np.sqrt(self.noise_var) * rng.normal(n)
        return np.stack([np.sin(t) + w, 2.0 * t - 3.0], axis=1)

    def pdf(self, x):
        raise DistributionError("curve law has no analytic density")


@dataclass
class EmpiricalDataset:
    """Sample matrix (N, d) with optional integer labels in [0, K)."""

    samples: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 2 or self.samples.shape[0] < 1:
            raise DatasetError(f"samples must be (N>=1, d), got shape {self.samples.shape}")
        if not np.all(np.isfinite(self.samples)):
            raise DatasetError("dataset contains non-finite values")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.samples.shape[0],):
                raise DatasetError("labels length must match sample count")
            if np.any(self.labels < 0):
                raise DatasetError("labels must be nonnegative")

    @property
    def n(self) -> int:
        return self.samples.shape[0]

    @property
    def dim(self) -> int:
        return self.samples.shape[1]


def standard_latent(dim: int) -> GaussianSpec:
    """Default latent: standard Gaussian of the configured dimension."""
    return GaussianSpec(np.zeros(dim), np.eye(dim))


def sample(spec, n: int, rng: Rng) -> np.ndarray:
    if n < 1:
        raise DistributionError(f"sample count must be >= 1, got {n}")
    return spec.sample(n, rng)


def pdf(spec, x) -> np.ndarray:
    return spec.pdf(x)


def log_pdf(spec, x) -> np.ndarray:
    return spec.log_pdf(x)


def minibatch(dataset: EmpiricalDataset, n: int, rng: Rng) -> np.ndarray:
    """Uniform minibatch without replacement within the batch."""
    if not 1 <= n <= dataset.n:
        raise DatasetError(f"batch size {n} outside [1, {dataset.n}]")
    idx = rng.permutation_prefix(dataset.n, n)
    return dataset.samples[idx]


def minibatch_labeled(dataset: EmpiricalDataset, n: int, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
    if dataset.labels is None:
        raise DatasetError("dataset has no labels")
    if not 1 <= n <= dataset.n:
        raise DatasetError(f"batch size {n} outside [1, {dataset.n}]")
    idx = rng.permutation_prefix(dataset.n, n)
    return dataset.samples[idx], dataset.labels[idx]


# ---- file formats -----------------------------------------------------------


def load_csv(path: str, labeled: bool = False) -> EmpiricalDataset:
    """One row per sample; optional final integer label column; header optional."""
    rows: list[list[str]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append([c.strip() for c in line.split(",")])
    if not rows:
        raise DatasetError(f"{path}: empty CSV")
    try:
        float(rows[0][0])
    except ValueError:
        rows = rows[1:]  # header line
        if not rows:
            raise DatasetError(f"{path}: CSV has a header but no data rows")
    try:
        data = np.array([[float(c) for c in r] for r in rows], dtype=np.float64)
    except ValueError as exc:
        raise DatasetError(f"{path}: non-numeric cell: {exc}") from exc
    if labeled:
        if data.shape[1] < 2:
            raise DatasetError(f"{path}: labeled CSV needs >= 2 columns")
        labels = data[:, -1]
        if not np.allclose(labels, np.round(labels)):
            raise DatasetError(f"{path}: label column is not integral")
        return EmpiricalDataset(data[:, :-1], labels.astype(np.int64))
    return EmpiricalDataset(data)


def save_binary(path: str, dataset: EmpiricalDataset) -> None:
    """16-byte header (magic, u32 N, u32 d) then little-endian f64 row-major payload."""
    with open(path, "wb") as fh:
        fh.write(_BINARY_MAGIC)
        fh.write(struct.pack("<II", dataset.n, dataset.dim))
        fh.write(np.ascontiguousarray(dataset.samples, dtype="<f8").tobytes())


def load_binary(path: str) -> EmpiricalDataset:
    with open(path, "rb") as fh:
        header = fh.read(16)
        if len(header) < 16:
            raise DatasetError(f"{path}: truncated header ({len(header)} bytes)")
        if header[:8] != _BINARY_MAGIC:
            raise DatasetError(f"{path}: bad magic {header[:8]!r}")
        n, d = struct.unpack("<II", header[8:16])
        payload = fh.read(8 * n * d)
        if len(payload) != 8 * n * d:
            raise DatasetError(f"{path}: truncated payload "
                               f"({len(payload)} of {8 * n * d} bytes)")
        data = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(n, d)
    return EmpiricalDataset(data)
