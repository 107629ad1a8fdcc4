"""Primal-dual minibatch training of push-forward couplings.

One step runs ``n_critic`` ascent updates on the dual potentials (fresh
minibatches each inner iteration, generated samples held fixed) followed by a
single descent update on the generator parameters, exactly the alternating
scheme the objective calls for:

    min_G max_{lambda}  E[c(G_1(Z), ..., G_m(Z))]
                        + eta * sum_i ( E[lambda_i(G_i(Z))] - E[lambda_i(X_i)] )

The two-marginal case is the m=2 instance of the same loop. Determinism is
strict: each iteration draws from its own counter-derived substream, so runs
are bit-reproducible and checkpoint resume coincides with an unbroken run.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn, tensor as T
from .cost import PairwiseSquaredCost
from .dist import EmpiricalDataset, GaussianSpec, minibatch, standard_latent
from .errors import DivergenceError, ShapeError
from .optim import make_optimizer
from .rng import Rng

# substream tags; iteration tags use 2k / 2k+1 and stay clear of these
TAG_INIT = 0x494E4954
TAG_DATA = 0x44415441
TAG_EVAL = 0x4556414C


@dataclass
class TrainConfig:
    iterations: int
    batch_size: int = 100
    n_critic: int = 5
    lr: float = 1e-4
    eta: float = 1e4
    seed: int = 0
    eval_every: int = 200
    eval_samples: int = 2000
    optimizer: str = "adam"
    ema_decay: float = 0.99
    divergence_limit: float = 1e9

    def __post_init__(self):
        if self.n_critic < 1 or self.batch_size < 1:
            raise ShapeError("n_critic and batch_size must be >= 1")
        if self.eta < 0:
            raise ShapeError("eta must be nonnegative")


@dataclass
class StepDiagnostics:
    iteration: int
    cost_term: float
    duals: tuple[float, ...]
    wd_raw: float
    wd_ema: float


@dataclass
class TransportEstimate:
    """Monte-Carlo WD estimate plus sampled plan rows and penalty diagnostics."""

    wd_estimate: float
    marginal_penalties: tuple[float, ...]
    iteration: int
    plan: np.ndarray


class GeneratorBundle:
    """Push-forward map from latent draws to one sample block per marginal.

    modes: "separate" (one net per marginal, the default), "joint" (a shared
    trunk whose output splits into blocks), "tied" (every marginal reads the
    same output; test wiring for identical-marginal cases).
    """

    def __init__(self, nets: list[nn.Mlp], dims: list[int], mode: str = "separate"):
        if mode not in ("separate", "joint", "tied"):
            raise ShapeError(f"unknown generator mode {mode!r}")
        if mode == "separate" and len(nets) != len(dims):
            raise ShapeError("separate mode needs one network per marginal")
        if mode in ("joint", "tied") and len(nets) != 1:
            raise ShapeError(f"{mode} mode takes exactly one network")
        if mode == "joint" and nets[0].out_dim != sum(dims):
            raise ShapeError(f"joint trunk out width {nets[0].out_dim} != {sum(dims)}")
        if mode == "tied" and any(d != dims[0] for d in dims):
            raise ShapeError("tied mode requires identical marginal dims")
        self.nets = nets
        self.dims = dims
        self.mode = mode

    @property
    def m(self) -> int:
        return len(self.dims)

    def forward(self, z: T.Tensor) -> list[T.Tensor]:
        if self.mode == "separate":
            return [net(z) for net in self.nets]
        out = self.nets[0](z)
        if self.mode == "tied":
            return [out for _ in self.dims]
        blocks, off = [], 0
        for d in self.dims:
            blocks.append(T.narrow(out, 1, off, d))
            off += d
        return blocks

    def forward_np(self, z: np.ndarray) -> list[np.ndarray]:
        outs = self.forward(T.Tensor(z))
        return [o.data for o in outs]

    def parameters(self) -> list[T.Tensor]:
        ps = []
        for net in self.nets:
            ps.extend(net.parameters())
        return ps


class SpotModel:
    """Generators, dual potentials, cost, and latent for one coupling problem."""

    def __init__(self, generators: GeneratorBundle, duals: list[nn.Mlp], cost,
                 latent: GaussianSpec, eta: float):
        if len(duals) != generators.m:
            raise ShapeError(f"{len(duals)} duals for {generators.m} marginals")
        for i, d in enumerate(duals):
            if d.out_dim != 1:
                raise ShapeError(f"dual {i} must be scalar-valued, out width {d.out_dim}")
        self.generators = generators
        self.duals = duals
        self.cost = cost
        self.latent = latent
        self.eta = eta

    @property
    def m(self) -> int:
        return self.generators.m

    @property
    def dims(self) -> list[int]:
        return self.generators.dims

    def cost_rows(self, blocks: list[T.Tensor]) -> T.Tensor:
        """Per-row ground cost of a coupled batch (m=2 costs take (x, y))."""
        if self.m == 2 and not isinstance(self.cost, PairwiseSquaredCost):
            return self.cost(blocks[0], blocks[1])
        return self.cost(blocks)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for i, net in enumerate(self.generators.nets):
            out.update(nn.state_arrays(net, f"gen{i}"))
        for i, net in enumerate(self.duals):
            out.update(nn.state_arrays(net, f"dual{i}"))
        for idx, p in enumerate(self.cost.trainable_parameters()):
            out[f"cost.param{idx}"] = p.data
        return out

    def load_state_arrays(self, blocks: dict[str, np.ndarray]) -> None:
        for i, net in enumerate(self.generators.nets):
            nn.load_state_arrays(net, f"gen{i}", blocks)
        for i, net in enumerate(self.duals):
            nn.load_state_arrays(net, f"dual{i}", blocks)
        for idx, p in enumerate(self.cost.trainable_parameters()):
            p.data = blocks[f"cost.param{idx}"].reshape(p.shape)


def build_model(dims: list[int], gen_widths: list[int], dual_widths: list[int],
                eta: float, seed: int, latent_dim: int | None = None,
                activation: str = "leaky_relu", mode: str = "separate",
                cost=None, spectral_generators: bool = False,
                leaky_slope: float = 0.01, symmetric_init: bool = False) -> SpotModel:
    """Standard wiring: per-marginal generators and 1-Lipschitz dual potentials.

    ``symmetric_init`` draws every generator from the same stream, so training
    starts at the diagonal coupling (all blocks equal); the pairing then grows
    only along the systematic transport direction instead of forming folds
    that the cost term cannot undo at large eta.
    """
    latent_dim = latent_dim if latent_dim is not None else max(dims)
    init = Rng(seed).substream(TAG_INIT)
    nets = []
    if mode == "separate":
        for i, d in enumerate(dims):
            spec = nn.MlpSpec([latent_dim, *gen_widths, d], activation=activation,
                              spectral=spectral_generators, leaky_slope=leaky_slope)
            gen_rng = (Rng(seed).substream(TAG_INIT).substream(100) if symmetric_init
                       else init.substream(100 + i))
            nets.append(nn.init_weights(spec, gen_rng))
    else:
        out = sum(dims) if mode == "joint" else dims[0]
        spec = nn.MlpSpec([latent_dim, *gen_widths, out], activation=activation,
                          spectral=spectral_generators, leaky_slope=leaky_slope)
        nets.append(nn.init_weights(spec, init.substream(100)))
    duals = []
    for i, d in enumerate(dims):
        spec = nn.MlpSpec([d, *dual_widths, 1], activation=activation, spectral=True,
                          leaky_slope=leaky_slope)
        duals.append(nn.init_weights(spec, init.substream(200 + i)))
    if cost is None:
        from .cost import EuclideanCost
        cost = EuclideanCost()
    return SpotModel(GeneratorBundle(nets, dims, mode), duals, cost,
                     standard_latent(latent_dim), eta)


# ---- objectives --------------------------------------------------------------


def discriminator_objective_net(dual: nn.Mlp, eta: float, gen_np: np.ndarray,
                                real_np: np.ndarray) -> T.Tensor:
    """eta * (mean lambda on generated - mean lambda on real); ascended.

    Both batches are scored in one forward pass so they share the same
    effective (power-iterated) weight.
    """
    n = gen_np.shape[0]
    both = T.Tensor(np.concatenate([gen_np, real_np], axis=0))
    scores = dual(both)
    s_gen = T.tmean(T.narrow(scores, 0, 0, n))
    s_real = T.tmean(T.narrow(scores, 0, n, real_np.shape[0]))
    return T.mul(T.constant(eta), T.sub(s_gen, s_real))


def discriminator_objective(model: SpotModel, gen_np: np.ndarray, real_np: np.ndarray,
                            i: int) -> T.Tensor:
    return discriminator_objective_net(model.duals[i], model.eta, gen_np, real_np)


def generator_objective(model: SpotModel, z_np: np.ndarray) -> tuple[T.Tensor, T.Tensor]:
    """(objective, cost term): mean cost + eta * sum_i mean lambda_i(G_i(Z)); descended."""
    blocks = model.generators.forward(T.Tensor(z_np))
    cost_term = T.tmean(model.cost_rows(blocks))
    obj = cost_term
    for i, block in enumerate(blocks):
        dual_score = T.tmean(model.duals[i](block))
        obj = T.add(obj, T.mul(T.constant(model.eta), dual_score))
    return obj, cost_term


# ---- trainer -------------------------------------------------------------------


class Trainer:
    """Owns optimizers, the EMA, and the per-iteration substream discipline."""

    def __init__(self, model: SpotModel, datasets: list[EmpiricalDataset],
                 config: TrainConfig):
        if len(datasets) != model.m:
            raise ShapeError(f"{len(datasets)} datasets for {model.m} marginals")
        for i, (ds, d) in enumerate(zip(datasets, model.dims)):
            if ds.dim != d:
                raise ShapeError(f"dataset {i} dim {ds.dim} != marginal dim {d}")
        self.model = model
        self.datasets = datasets
        self.config = config
        self.root = Rng(config.seed)
        # Only generator parameters step here. A trainable cost (embedding
        # networks) passes gradients through to the generators; its own
        # parameters are stepped by whoever owns them (the DA trainer's
        # classifier phases), never by this cycle.
        gen_params = model.generators.parameters()
        self.opt_gen = make_optimizer(config.optimizer, gen_params, config.lr,
                                      names=[f"gen.p{i}" for i in range(len(gen_params))])
        self.opt_duals = [
            make_optimizer(config.optimizer, d.parameters(), config.lr,
                           names=[f"dual{i}.p{j}" for j in range(len(d.parameters()))])
            for i, d in enumerate(model.duals)
        ]
        self.iteration = 0
        self.wd_ema = float("nan")

    # one full Algorithm-1 cycle; `rng` is this iteration's substream
    def _cycle(self, rng: Rng) -> StepDiagnostics:
        cfg = self.config
        model = self.model
        dual_vals = [float("nan")] * model.m
        for _ in range(cfg.n_critic):
            real = [minibatch(ds, cfg.batch_size, rng) for ds in self.datasets]
            z = model.latent.sample(cfg.batch_size, rng)
            gen = model.generators.forward_np(z)
            for i in range(model.m):
                with T.Graph():
                    obj = discriminator_objective(model, gen[i], real[i], i)
                    val = obj.item()
                    self.opt_duals[i].zero_grad()
                    T.backward(obj)
                self._guard(val, f"dual {i} objective")
                self.opt_duals[i].ascend_step()
                dual_vals[i] = val / model.eta if model.eta > 0 else val
        z = model.latent.sample(cfg.batch_size, rng)
        with T.Graph():
            obj, cost_term = generator_objective(model, z)
            obj_val = obj.item()
            cost_val = cost_term.item()
            self.opt_gen.zero_grad()
            T.backward(obj)
        self._guard(obj_val, "generator objective")
        self.opt_gen.step()

        if self.iteration == 0 or np.isnan(self.wd_ema):
            self.wd_ema = cost_val
        else:
            d = cfg.ema_decay
            self.wd_ema = d * self.wd_ema + (1.0 - d) * cost_val
        diag = StepDiagnostics(self.iteration, cost_val, tuple(dual_vals),
                               cost_val, self.wd_ema)
        self.iteration += 1
        return diag

    def _guard(self, value: float, what: str) -> None:
        if not np.isfinite(value) or abs(value) > self.config.divergence_limit:
            raise DivergenceError(
                f"{what} diverged at iteration {self.iteration}: {value}",
                diagnostics={"iteration": self.iteration, "value": value,
                             "wd_ema": self.wd_ema})

    def step(self) -> StepDiagnostics:
        return self._cycle(self.root.substream(2 * self.iteration))

    def run(self, on_eval=None) -> list[StepDiagnostics]:
        """Train to the configured budget, invoking on_eval at the cadence."""
        out = []
        for _ in range(self.config.iterations - self.iteration):
            diag = self.step()
            out.append(diag)
            if on_eval is not None and diag.iteration % self.config.eval_every == 0:
                on_eval(diag)
        return out

    # ---- persistence ----

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = self.model.state_arrays()
        out.update(self.opt_gen.state_arrays("opt_gen"))
        for i, opt in enumerate(self.opt_duals):
            out.update(opt.state_arrays(f"opt_dual{i}"))
        out["trainer.iteration"] = np.array([float(self.iteration)])
        out["trainer.wd_ema"] = np.array([self.wd_ema])
        out["trainer.seed"] = np.array([float(self.config.seed)])
        return out

    def load_state_arrays(self, blocks: dict[str, np.ndarray]) -> None:
        self.model.load_state_arrays(blocks)
        self.opt_gen.load_state_arrays("opt_gen", blocks)
        for i, opt in enumerate(self.opt_duals):
            opt.load_state_arrays(f"opt_dual{i}", blocks)
        self.iteration = int(blocks["trainer.iteration"][0])
        self.wd_ema = float(blocks["trainer.wd_ema"][0])


# ---- evaluation -----------------------------------------------------------------


def estimate_wd(model: SpotModel, n_eval: int, rng: Rng,
                datasets: list[EmpiricalDataset] | None = None,
                iteration: int = -1, plan_rows: int = 64) -> TransportEstimate:
    """Monte-Carlo mean coupled cost over fresh latents, on a frozen snapshot."""
    with nn.frozen_spectral():
        z = model.latent.sample(n_eval, rng)
        blocks = [b.data for b in model.generators.forward(T.Tensor(z))]
        rows = model.cost_rows([T.Tensor(b) for b in blocks])
        wd = float(rows.data.mean())
        penalties = []
        for i in range(model.m):
            if datasets is None:
                penalties.append(float("nan"))
                continue
            nb = min(n_eval, datasets[i].n)
            real = minibatch(datasets[i], nb, rng)
            s_gen = model.duals[i](T.Tensor(blocks[i])).data.mean()
            s_real = model.duals[i](T.Tensor(real)).data.mean()
            penalties.append(model.eta * float(s_gen - s_real))
        plan = sample_plan(model, plan_rows, rng)
    return TransportEstimate(wd, tuple(penalties), iteration, plan)


def sample_plan(model: SpotModel, k: int, rng: Rng) -> np.ndarray:
    """k coupled rows (G_1(z), ..., G_m(z)); the shared latent is the coupling."""
    if k == 0:
        return np.empty((0, sum(model.dims)))
    with nn.frozen_spectral():
        z = model.latent.sample(k, rng)
        blocks = model.generators.forward_np(z)
    return np.concatenate(blocks, axis=1)


def train_step(trainer: Trainer) -> StepDiagnostics:
    """Single Algorithm-1 cycle (critic ascents then one generator descent)."""
    return trainer.step()


def train_multi_marginal(generators: GeneratorBundle, duals: list[nn.Mlp], cost_m,
                         datasets: list[EmpiricalDataset], config: TrainConfig,
                         latent: GaussianSpec | None = None) -> Trainer:
    """m-marginal wiring of the same loop; m=2 coincides with the two-marginal trainer."""
    latent = latent if latent is not None else standard_latent(max(generators.dims))
    model = SpotModel(generators, duals, cost_m, latent, config.eta)
    return Trainer(model, datasets, config)
