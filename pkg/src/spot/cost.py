"""Ground costs c(x, y) shared by trainers and oracles.

All costs return one nonnegative value per batch row and are differentiable
through the graph. The edge-aware cost convolves each channel with the two
fixed 3x3 edge filters (valid mode, no padding), takes absolute edge maps,
and sums Frobenius norms of their differences; both filters are antisymmetric
under 180-degree rotation, so correlation and true convolution agree under
the absolute value.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ShapeError

EDGE_FILTER_1 = np.array([[-1.0, 0.0, 1.0],
                          [-2.0, 0.0, 2.0],
                          [-1.0, 0.0, 1.0]])
EDGE_FILTER_2 = np.array([[1.0, 2.0, 1.0],
                          [0.0, 0.0, 0.0],
                          [-1.0, -2.0, -1.0]])


class EuclideanCost:
    """c(x, y) = ||x - y||."""

    def __call__(self, x: T.Tensor, y: T.Tensor) -> T.Tensor:
        _check_same_width(x, y)
        return T.rownorm(T.sub(x, y))

    def trainable_parameters(self) -> list[T.Tensor]:
        return []


class SquaredEuclideanCost:
    """c(x, y) = ||x - y||^2."""

    def __call__(self, x: T.Tensor, y: T.Tensor) -> T.Tensor:
        _check_same_width(x, y)
        d = T.sub(x, y)
        return T.tsum(T.mul(d, d), axis=1)

    def trainable_parameters(self) -> list[T.Tensor]:
        return []


class EmbeddingCost:
    """Squared distance between two embedding networks' outputs.

    Gradients flow into both inputs and both embedding networks; the networks
    are exposed as trainable parameters so the generator descent can update them.
    """

    def __init__(self, emb_x, emb_y):
        if emb_x.out_dim != emb_y.out_dim:
            raise ShapeError(f"embedding widths differ: {emb_x.out_dim} vs {emb_y.out_dim}")
        self.emb_x = emb_x
        self.emb_y = emb_y

    def __call__(self, x: T.Tensor, y: T.Tensor) -> T.Tensor:
        d = T.sub(self.emb_x(x), self.emb_y(y))
        return T.tsum(T.mul(d, d), axis=1)

    def trainable_parameters(self) -> list[T.Tensor]:
        return self.emb_x.parameters() + self.emb_y.parameters()


def _correlate_valid(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Valid-mode cross-correlation of (..., H, W) with a 3x3 kernel."""
    ho, wo = img.shape[-2] - 2, img.shape[-1] - 2
    out = np.zeros(img.shape[:-2] + (ho, wo))
    for di in range(3):
        for dj in range(3):
            out += kernel[di, dj] * img[..., di:di + ho, dj:dj + wo]
    return out


def _correlate_adjoint(grad_out: np.ndarray, kernel: np.ndarray, h: int, w: int) -> np.ndarray:
    """Adjoint of valid correlation: scatter grads back to (..., H, W)."""
    ho, wo = h - 2, w - 2
    out = np.zeros(grad_out.shape[:-2] + (h, w))
    for di in range(3):
        for dj in range(3):
            out[..., di:di + ho, dj:dj + wo] += kernel[di, dj] * grad_out
    return out


class SobelEdgeCost:
    """Sum over both edge filters and all channels of ||  |K*x_j| - |K*y_j|  ||_F."""

    def __init__(self, channels: int, height: int, width: int):
        if height < 3 or width < 3:
            raise ShapeError(f"edge cost needs images >= 3x3, got {height}x{width}")
        self.channels = channels
        self.height = height
        self.width = width

    def __call__(self, x: T.Tensor, y: T.Tensor) -> T.Tensor:
        c, h, w = self.channels, self.height, self.width
        for t in (x, y):
            if t.ndim != 2 or t.shape[1] != c * h * w:
                raise ShapeError(f"batch rows must have {c}x{h}x{w}={c * h * w} values, "
                                 f"got shape {t.shape}")
        if x.shape[0] != y.shape[0]:
            raise ShapeError(f"batch sizes differ: {x.shape[0]} vs {y.shape[0]}")
        b = x.shape[0]
        xi = x.data.reshape(b, c, h, w)
        yi = y.data.reshape(b, c, h, w)

        kernels = (EDGE_FILTER_1, EDGE_FILTER_2)
        ex = [_correlate_valid(xi, k) for k in kernels]
        ey = [_correlate_valid(yi, k) for k in kernels]
        diffs = [np.abs(a) - np.abs(bb) for a, bb in zip(ex, ey)]
        # per (row, kernel, channel) Frobenius norm of the difference map
        norms = [np.sqrt(np.einsum("bcij,bcij->bc", d, d)) for d in diffs]
        out = sum(n.sum(axis=1) for n in norms)

        def vjp(g):
            gx = np.zeros((b, c, h, w))
            gy = np.zeros((b, c, h, w))
            for k_idx, kern in enumerate(kernels):
                d, nrm = diffs[k_idx], norms[k_idx]
                safe = np.where(nrm > 0.0, nrm, 1.0)
                scale = np.where(nrm > 0.0, g[:, None] / safe, 0.0)
                gd = d * scale[:, :, None, None]
                gx += _correlate_adjoint(gd * np.sign(ex[k_idx]), kern, h, w)
                gy += _correlate_adjoint(-gd * np.sign(ey[k_idx]), kern, h, w)
            return ((x, gx.reshape(b, -1)), (y, gy.reshape(b, -1)))

        return T._record(out, "sobel_edge_cost", (x, y), vjp)

    def trainable_parameters(self) -> list[T.Tensor]:
        return []


class PairwiseSquaredCost:
    """Multi-marginal cost: sum of squared distances over all block pairs."""

    def __call__(self, blocks: list[T.Tensor]) -> T.Tensor:
        if len(blocks) < 2:
            raise ShapeError("pairwise cost needs >= 2 blocks")
        total = None
        sq = SquaredEuclideanCost()
        for i in range(len(blocks)):
            for j in range(i + 1, len(blocks)):
                term = sq(blocks[i], blocks[j])
                total = term if total is None else T.add(total, term)
        return total

    def trainable_parameters(self) -> list[T.Tensor]:
        return []


def _check_same_width(x: T.Tensor, y: T.Tensor) -> None:
    if x.ndim != 2 or y.ndim != 2 or x.shape != y.shape:
        raise ShapeError(f"cost operands must share shape (batch, d), got {x.shape} vs {y.shape}")


def make_cost(kind: str, **kw):
    """Cost factory: euclidean | squared_euclidean | sobel | embedding | pairwise_squared."""
    if kind == "euclidean":
        return EuclideanCost()
    if kind == "squared_euclidean":
        return SquaredEuclideanCost()
    if kind == "sobel":
        return SobelEdgeCost(kw["channels"], kw["height"], kw["width"])
    if kind == "embedding":
        return EmbeddingCost(kw["emb_x"], kw["emb_y"])
    if kind == "pairwise_squared":
        return PairwiseSquaredCost()
    raise ShapeError(f"unknown cost kind {kind!r}")


def cost(kind_or_cost, x: T.Tensor, y: T.Tensor) -> T.Tensor:
    """Evaluate a cost by kind name or instance; returns Tensor[batch]."""
    fn = make_cost(kind_or_cost) if isinstance(kind_or_cost, str) else kind_or_cost
    return fn(x, y)
