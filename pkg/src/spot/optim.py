"""Adam as configured in the experiments (betas 0.5/0.999), plus plain SGD.

The primal-dual loop ascends dual parameters and descends generator
parameters; both directions share one moment state per optimizer instance.
"""

from __future__ import annotations

import numpy as np

from .errors import DivergenceError
from .tensor import Tensor


class Adam:
    def __init__(self, params: list[Tensor], lr: float,
                 beta1: float = 0.5, beta2: float = 0.999, eps: float = 1e-8,
                 names: list[str] | None = None):
        self.params = [p for p in params if p.requires_grad]
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.names = names or [f"param{i}" for i in range(len(self.params))]
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def _apply(self, sign: float) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1 ** self.t
        bc2 = 1.0 - self.beta2 ** self.t
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            elif not np.all(np.isfinite(g)):
                raise DivergenceError(f"non-finite gradient for {self.names[i]}")
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[i] / bc1
            v_hat = self.v[i] / bc2
            p.data = p.data + sign * self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def step(self) -> None:
        """Descent: p <- p - lr * m_hat / (sqrt(v_hat) + eps)."""
        self._apply(-1.0)

    def ascend_step(self) -> None:
        """Ascent: same update with the sign flipped."""
        self._apply(+1.0)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    # checkpoint support
    def state_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        out = {f"{prefix}.t": np.array([float(self.t)])}
        for i in range(len(self.params)):
            out[f"{prefix}.m{i}"] = self.m[i]
            out[f"{prefix}.v{i}"] = self.v[i]
        return out

    def load_state_arrays(self, prefix: str, blocks: dict[str, np.ndarray]) -> None:
        self.t = int(blocks[f"{prefix}.t"][0])
        for i, p in enumerate(self.params):
            self.m[i] = blocks[f"{prefix}.m{i}"].reshape(p.data.shape)
            self.v[i] = blocks[f"{prefix}.v{i}"].reshape(p.data.shape)


class Sgd:
    """Literal plain-gradient updates, kept behind a flag for algorithm-shape tests."""

    def __init__(self, params: list[Tensor], lr: float, names: list[str] | None = None):
        self.params = [p for p in params if p.requires_grad]
        self.lr = lr
        self.names = names or [f"param{i}" for i in range(len(self.params))]
        self.t = 0

    def _apply(self, sign: float) -> None:
        self.t += 1
        for i, p in enumerate(self.params):
            g = p.grad
            if g is None:
                continue
            if not np.all(np.isfinite(g)):
                raise DivergenceError(f"non-finite gradient for {self.names[i]}")
            p.data = p.data + sign * self.lr * g

    def step(self) -> None:
        self._apply(-1.0)

    def ascend_step(self) -> None:
        self._apply(+1.0)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def state_arrays(self, prefix: str) -> dict[str, np.ndarray]:
        return {f"{prefix}.t": np.array([float(self.t)])}

    def load_state_arrays(self, prefix: str, blocks: dict[str, np.ndarray]) -> None:
        self.t = int(blocks[f"{prefix}.t"][0])


def make_optimizer(kind: str, params: list[Tensor], lr: float, names=None):
    if kind == "adam":
        return Adam(params, lr, names=names)
    if kind == "sgd":
        return Sgd(params, lr, names=names)
    raise ValueError(f"unknown optimizer kind {kind!r}")
