"""Fully connected networks for generators and dual potentials.

Dual potentials carry spectral normalization: each weight matrix is divided
by a power-iteration estimate of its largest singular value, bounding the
layer's operator norm near 1. The estimate state (u, v) persists across
forward passes and is treated as constant in the backward pass; gradients
flow through the raw weight only.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .rng import Rng

SN_SIGMA_FLOOR = 1e-12

_sn_state = threading.local()


@contextmanager
def frozen_spectral():
    """Evaluate spectrally normalized nets without mutating their power-iteration state.

    Used by evaluation paths (estimates, plan sampling) so snapshots stay pure.
    """
    prev = getattr(_sn_state, "frozen", False)
    _sn_state.frozen = True
    try:
        yield
    finally:
        _sn_state.frozen = prev


def _sn_frozen() -> bool:
    return getattr(_sn_state, "frozen", False)

_ACTIVATIONS = ("leaky_relu", "prelu", "tanh", "sigmoid", "relu", "linear")


@dataclass
class MlpSpec:
    """Layer widths are [in, hidden..., out]; at least one layer (len >= 2)."""

    widths: list[int]
    activation: str = "leaky_relu"
    output_activation: str = "linear"
    spectral: bool = False
    leaky_slope: float = 0.01

    def __post_init__(self):
        if len(self.widths) < 2 or any(w <= 0 for w in self.widths):
            raise ShapeError(f"invalid widths {self.widths}: need >=1 layer, positive widths")
        for a in (self.activation, self.output_activation):
            if a not in _ACTIVATIONS:
                raise ShapeError(f"unknown activation {a!r}")


class SpectralState:
    """Persistent power-iteration vectors for one weight matrix."""

    __slots__ = ("u", "v", "iterations_per_step", "floored", "initialized")

    def __init__(self, out_dim: int, in_dim: int, rng: Rng, iterations_per_step: int = 1):
        u = rng.normal(out_dim)
        self.u = u / np.linalg.norm(u)
        self.v = np.zeros(in_dim)
        self.iterations_per_step = iterations_per_step
        self.floored = False
        self.initialized = False


class LinearLayer:
    """Affine layer, weight stored (out, in)."""

    __slots__ = ("weight", "bias", "spectral")

    def __init__(self, weight: np.ndarray, bias: np.ndarray, spectral: SpectralState | None = None):
        self.weight = T.parameter(weight)
        self.bias = T.parameter(bias)
        self.spectral = spectral

    @property
    def out_dim(self) -> int:
        return self.weight.shape[0]

    @property
    def in_dim(self) -> int:
        return self.weight.shape[1]


def power_iterate(layer: LinearLayer, iterations: int) -> float:
    """Run power iterations on the raw weight, updating persistent u, v; returns sigma estimate."""
    st = layer.spectral
    w = layer.weight.data
    u, v = st.u, st.v
    for _ in range(iterations):
        v = w.T @ u
        nv = np.linalg.norm(v)
        v = v / nv if nv > 0 else v
        u = w @ v
        nu = np.linalg.norm(u)
        u = u / nu if nu > 0 else u
    st.u, st.v = u, v
    st.initialized = True
    return float(u @ w @ v)


def spectral_normalize(layer: LinearLayer) -> T.Tensor:
    """Effective weight W / sigma_hat with u, v held constant in the backward pass."""
    st = layer.spectral
    if st is None:
        return layer.weight
    if not _sn_frozen() or not st.initialized:
        power_iterate(layer, st.iterations_per_step)
    sigma_raw = st.u @ layer.weight.data @ st.v
    st.floored = sigma_raw < SN_SIGMA_FLOOR
    u_row = T.constant(st.u[None, :])
    v_col = T.constant(st.v[:, None])
    sigma = T.matmul(u_row, T.matmul(layer.weight, v_col))
    sigma = T.max_with_scalar(sigma, SN_SIGMA_FLOOR)
    return T.div(layer.weight, sigma)


class Mlp:
    """Feed-forward net built from an MlpSpec; prelu slopes are learnable per layer."""

    def __init__(self, spec: MlpSpec, layers: list[LinearLayer], prelu_alphas: list[T.Tensor]):
        self.spec = spec
        self.layers = layers
        self.prelu_alphas = prelu_alphas

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def parameters(self) -> list[T.Tensor]:
        ps: list[T.Tensor] = []
        for layer in self.layers:
            ps.append(layer.weight)
            ps.append(layer.bias)
        ps.extend(self.prelu_alphas)
        return ps

    def _activate(self, x: T.Tensor, kind: str, layer_idx: int) -> T.Tensor:
        if kind == "linear":
            return x
        if kind == "leaky_relu":
            return T.leaky_relu(x, self.spec.leaky_slope)
        if kind == "relu":
            return T.relu(x)
        if kind == "tanh":
            return T.tanh(x)
        if kind == "sigmoid":
            return T.sigmoid(x)
        if kind == "prelu":
            return T.prelu(x, self.prelu_alphas[layer_idx])
        raise ShapeError(f"unknown activation {kind!r}")

    def forward(self, x: T.Tensor) -> T.Tensor:
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(f"input shape {x.shape} incompatible with first layer "
                             f"(expects width {self.in_dim})")
        last = len(self.layers) - 1
        for i, layer in enumerate(self.layers):
            w = spectral_normalize(layer) if layer.spectral is not None else layer.weight
            x = T.linear(x, w, layer.bias)
            kind = self.spec.output_activation if i == last else self.spec.activation
            x = self._activate(x, kind, i)
        return x

    def __call__(self, x: T.Tensor) -> T.Tensor:
        return self.forward(x)


def init_weights(spec: MlpSpec, seed_or_rng) -> Mlp:
    """Xavier-uniform weights U(+-sqrt(6/(in+out))), zero biases; bit-reproducible per seed."""
    rng = seed_or_rng if isinstance(seed_or_rng, Rng) else Rng(seed_or_rng)
    layers: list[LinearLayer] = []
    alphas: list[T.Tensor] = []
    n_layers = len(spec.widths) - 1
    for i in range(n_layers):
        fan_in, fan_out = spec.widths[i], spec.widths[i + 1]
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        w = (rng.uniform(fan_out * fan_in) * 2.0 - 1.0) * bound
        w = w.reshape(fan_out, fan_in)
        sn = SpectralState(fan_out, fan_in, rng) if spec.spectral else None
        layers.append(LinearLayer(w, np.zeros(fan_out), sn))
        kind = spec.output_activation if i == n_layers - 1 else spec.activation
        alphas.append(T.parameter(np.float64(0.25)) if kind == "prelu"
                      else T.parameter(np.float64(0.25), requires_grad=False))
    return Mlp(spec, layers, alphas)


def state_arrays(net: Mlp, prefix: str) -> dict[str, np.ndarray]:
    """Named views of every persistent array (params + spectral state) for checkpointing."""
    out: dict[str, np.ndarray] = {}
    for i, layer in enumerate(net.layers):
        out[f"{prefix}.layer{i}.weight"] = layer.weight.data
        out[f"{prefix}.layer{i}.bias"] = layer.bias.data
        if layer.spectral is not None:
            out[f"{prefix}.layer{i}.sn_u"] = layer.spectral.u
            out[f"{prefix}.layer{i}.sn_v"] = layer.spectral.v
        out[f"{prefix}.layer{i}.prelu"] = net.prelu_alphas[i].data
    return out


def load_state_arrays(net: Mlp, prefix: str, blocks: dict[str, np.ndarray]) -> None:
    for i, layer in enumerate(net.layers):
        layer.weight.data = blocks[f"{prefix}.layer{i}.weight"].reshape(layer.weight.shape)
        layer.bias.data = blocks[f"{prefix}.layer{i}.bias"].reshape(layer.bias.shape)
        if layer.spectral is not None:
            layer.spectral.u = blocks[f"{prefix}.layer{i}.sn_u"].reshape(-1)
            layer.spectral.v = blocks[f"{prefix}.layer{i}.sn_v"].reshape(-1)
        net.prelu_alphas[i].data = blocks[f"{prefix}.layer{i}.prelu"].reshape(
            net.prelu_alphas[i].shape)
