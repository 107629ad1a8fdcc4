"""ODE-flow generator with density transport and adjoint gradients.

The generator is the time-1 map of dz/dt = field(z, t). Integrating the
augmented state (z, log p) with the instantaneous change of variables

    d log p / dt = -trace(d field / d z)

recovers the coupled density at the output. The trace is exact: for each
coordinate the Jacobian diagonal entry is propagated through the layers in
closed form (d is small here), with the activation derivative registered as
its own primitive so the whole augmented dynamics stays differentiable by
the first-order engine.

Gradients never differentiate through a monolithic taped integration.
``adjoint_backward`` sweeps t: 1 -> 0 one RK4 step at a time, replaying each
step on a tiny graph from a checkpointed (default) or reconstructed state and
pulling the cotangents (a_z, a_logp) backward while accumulating parameter
gradients. That is the discrete adjoint of the fixed-step integrator: exact
reverse mode for the computed trajectory, validated against finite
differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn, tensor as T
from .dist import EmpiricalDataset, GaussianSpec, minibatch, standard_latent
from .errors import DivergenceError, ShapeError
from .optim import make_optimizer
from .rng import Rng
from .trainer import StepDiagnostics, TrainConfig, discriminator_objective_net

DEFAULT_STEPS = 32


@dataclass
class FlowState:
    """Augmented integration state at time t."""

    z: np.ndarray
    logp: np.ndarray | None
    t: float


class OdeField:
    """Velocity network xi(z, t): an MLP over (z, t) with tanh hidden layers.

    Splits conceptually as (xi_1, xi_2) over (dim_x, dim_y); the transported
    log-density uses the sum of both diagonal blocks' traces, which equals the
    full Jacobian trace.
    """

    def __init__(self, net: nn.Mlp, dim_x: int, dim_y: int):
        d = dim_x + dim_y
        if net.in_dim != d + 1:
            raise ShapeError(f"field net takes (z, t): in width must be {d + 1}, got {net.in_dim}")
        if net.out_dim != d:
            raise ShapeError(f"field net out width must be {d}, got {net.out_dim}")
        if len(net.layers) > 1 and net.spec.activation != "tanh":
            raise ShapeError("field hidden activation must be tanh (smooth trace gradients)")
        if net.spec.output_activation != "linear":
            raise ShapeError("field output must be linear")
        self.net = net
        self.dim_x = dim_x
        self.dim_y = dim_y

    @property
    def dim(self) -> int:
        return self.dim_x + self.dim_y

    @classmethod
    def build(cls, dim_x: int, dim_y: int, hidden: list[int] | None = None,
              seed: int = 0) -> "OdeField":
        hidden = hidden if hidden is not None else [64, 64, 64]
        d = dim_x + dim_y
        spec = nn.MlpSpec([d + 1, *hidden, d], activation="tanh")
        return cls(nn.init_weights(spec, seed), dim_x, dim_y)

    def parameters(self) -> list[T.Tensor]:
        return self.net.parameters()

    def field_and_trace(self, z: T.Tensor, t: float,
                        want_trace: bool) -> tuple[T.Tensor, T.Tensor | None]:
        """Velocity at (z, t) and, when asked, the per-row Jacobian trace."""
        b = z.shape[0]
        layers = self.net.layers
        n_layers = len(layers)
        tcol = T.constant(np.full((b, 1), float(t)))
        x = T.concat([z, tcol], axis=1)
        pres: list[T.Tensor] = []
        for i, layer in enumerate(layers):
            x = T.linear(x, layer.weight, layer.bias)
            if i < n_layers - 1:
                pres.append(x)
                x = T.tanh(x)
        out = x
        if not want_trace:
            return out, None

        trace = None
        for i in range(self.dim):
            if n_layers == 1:
                wii = T.narrow(T.narrow(layers[0].weight, 0, i, 1), 1, i, 1)
                tr_i = T.mul(T.constant(np.ones((b, 1))), wii)
            else:
                w0col = T.reshape(T.narrow(layers[0].weight, 1, i, 1),
                                  (layers[0].out_dim,))
                v = T.mul(T.tanh_deriv(pres[0]), w0col)
                for l in range(1, n_layers - 1):
                    v = T.linear(v, layers[l].weight)
                    v = T.mul(T.tanh_deriv(pres[l]), v)
                v = T.linear(v, layers[n_layers - 1].weight)
                tr_i = T.narrow(v, 1, i, 1)
            trace = tr_i if trace is None else T.add(trace, tr_i)
        return out, T.reshape(trace, (b,))


def _rk4_step(field: OdeField, z: T.Tensor, logp: T.Tensor | None, t0: float,
              h: float, with_logp: bool) -> tuple[T.Tensor, T.Tensor | None]:
    """One classical RK4 step of the augmented system, as graph ops."""
    f1, tr1 = field.field_and_trace(z, t0, with_logp)
    z2 = T.add(z, T.mul(T.constant(0.5 * h), f1))
    f2, tr2 = field.field_and_trace(z2, t0 + 0.5 * h, with_logp)
    z3 = T.add(z, T.mul(T.constant(0.5 * h), f2))
    f3, tr3 = field.field_and_trace(z3, t0 + 0.5 * h, with_logp)
    z4 = T.add(z, T.mul(T.constant(h), f3))
    f4, tr4 = field.field_and_trace(z4, t0 + h, with_logp)
    sixth = h / 6.0
    incr = T.add(T.add(f1, f4), T.mul(T.constant(2.0), T.add(f2, f3)))
    z_next = T.add(z, T.mul(T.constant(sixth), incr))
    logp_next = None
    if with_logp:
        tr = T.add(T.add(tr1, tr4), T.mul(T.constant(2.0), T.add(tr2, tr3)))
        logp_next = T.sub(logp, T.mul(T.constant(sixth), tr))
    return z_next, logp_next


def integrate_forward(field: OdeField, z0: np.ndarray, logp0: np.ndarray | None,
                      steps: int, keep_checkpoints: bool = False
                      ) -> tuple[FlowState, list[np.ndarray] | None]:
    """Fixed-step RK4 from t=0 to t=1 on (z, log p).

    ``logp0 is None`` skips density transport entirely (no trace evaluations).
    Checkpoints, when kept, are the z values at every step start (for the
    backward sweep).
    """
    if steps < 1:
        raise ShapeError(f"steps must be >= 1, got {steps}")
    with_logp = logp0 is not None
    h = 1.0 / steps
    z = T.Tensor(np.asarray(z0, dtype=np.float64))
    logp = T.Tensor(np.asarray(logp0, dtype=np.float64)) if with_logp else None
    checkpoints = [z.data.copy()] if keep_checkpoints else None
    for k in range(steps):
        z, logp = _rk4_step(field, z, logp, k * h, h, with_logp)
        if not np.all(np.isfinite(z.data)):
            raise DivergenceError(f"flow blew up at t={(k + 1) * h:.4f}")
        if keep_checkpoints and k < steps - 1:
            checkpoints.append(z.data.copy())
    return FlowState(z.data, logp.data if with_logp else None, 1.0), checkpoints


def adjoint_backward(field: OdeField, checkpoints: list[np.ndarray] | None,
                     terminal: FlowState, dloss_dz1: np.ndarray,
                     dloss_dlogp1: np.ndarray | None = None, steps: int = DEFAULT_STEPS,
                     mode: str = "checkpoint") -> tuple[np.ndarray, np.ndarray | None]:
    """Backward sweep t: 1 -> 0 carrying (a_z, a_logp), accumulating field grads.

    mode "checkpoint" replays each step from the stored forward state (default);
    mode "recompute" reconstructs states by integrating the velocity backward
    from z(1), which drifts on stiff fields. Parameter gradients accumulate
    into the field's ``grad`` buffers; returns the cotangent at t=0.
    """
    if mode not in ("checkpoint", "recompute"):
        raise ShapeError(f"unknown adjoint mode {mode!r}")
    if mode == "checkpoint" and checkpoints is None:
        raise ShapeError("checkpoint mode needs the forward checkpoints")
    with_logp = dloss_dlogp1 is not None
    h = 1.0 / steps
    a_z = np.asarray(dloss_dz1, dtype=np.float64).copy()
    a_p = np.asarray(dloss_dlogp1, dtype=np.float64).copy() if with_logp else None
    z_run = terminal.z.copy()
    b = z_run.shape[0]
    for k in reversed(range(steps)):
        if mode == "checkpoint":
            z_start = checkpoints[k]
        else:
            z_start = _reverse_step(field, z_run, (k + 1) * h, h)
            z_run = z_start
        z_leaf = T.Tensor(z_start, requires_grad=True)
        logp_leaf = T.Tensor(np.zeros(b), requires_grad=True) if with_logp else None
        with T.Graph() as g:
            z_next, logp_next = _rk4_step(field, z_leaf, logp_leaf, k * h, h, with_logp)
            seeds = [(z_next, a_z)]
            if with_logp:
                seeds.append((logp_next, a_p))
            g.backward_from(seeds)
        a_z = z_leaf.grad if z_leaf.grad is not None else np.zeros_like(z_start)
        if with_logp:
            a_p = logp_leaf.grad if logp_leaf.grad is not None else np.zeros(b)
    return a_z, a_p


def _reverse_step(field: OdeField, z1: np.ndarray, t1: float, h: float) -> np.ndarray:
    """One RK4 step of dz/ds = -field(z, t1 - s); approximate inverse of the forward step."""
    z = T.Tensor(z1)

    def neg_field(zt, s):
        f, _ = field.field_and_trace(zt, t1 - s, False)
        return T.neg(f)

    f1 = neg_field(z, 0.0)
    z2 = T.add(z, T.mul(T.constant(0.5 * h), f1))
    f2 = neg_field(z2, 0.5 * h)
    z3 = T.add(z, T.mul(T.constant(0.5 * h), f2))
    f3 = neg_field(z3, 0.5 * h)
    z4 = T.add(z, T.mul(T.constant(h), f3))
    f4 = neg_field(z4, h)
    incr = T.add(T.add(f1, f4), T.mul(T.constant(2.0), T.add(f2, f3)))
    return z.data + (h / 6.0) * incr.data


def push_density(field: OdeField, x_query: np.ndarray, latent: GaussianSpec,
                 steps: int = DEFAULT_STEPS) -> np.ndarray:
    """Density of the flow's output at query points.

    Integrates backward from t=1, accumulating the log-density change, then
    evaluates the latent log-density at the recovered preimage.
    """
    x = np.atleast_2d(np.asarray(x_query, dtype=np.float64))
    h = 1.0 / steps
    z = T.Tensor(x)
    acc = T.Tensor(np.zeros(x.shape[0]))  # accumulates -integral of trace

    def dynamics(state_z, state_acc, t):
        f, tr = field.field_and_trace(state_z, t, True)
        return T.neg(f), T.neg(tr)

    for k in range(steps):
        t1 = 1.0 - k * h
        f1, a1 = dynamics(z, acc, t1)
        z2 = T.add(z, T.mul(T.constant(0.5 * h), f1))
        f2, a2 = dynamics(z2, acc, t1 - 0.5 * h)
        z3 = T.add(z, T.mul(T.constant(0.5 * h), f2))
        f3, a3 = dynamics(z3, acc, t1 - 0.5 * h)
        z4 = T.add(z, T.mul(T.constant(h), f3))
        f4, a4 = dynamics(z4, acc, t1 - h)
        zi = T.add(T.add(f1, f4), T.mul(T.constant(2.0), T.add(f2, f3)))
        ai = T.add(T.add(a1, a4), T.mul(T.constant(2.0), T.add(a2, a3)))
        z = T.add(z, T.mul(T.constant(h / 6.0), zi))
        acc = T.add(acc, T.mul(T.constant(h / 6.0), ai))
        if not np.all(np.isfinite(z.data)):
            raise DivergenceError(f"reverse flow blew up at t={1.0 - (k + 1) * h:.4f}")
    logp = latent.log_pdf(z.data) + acc.data
    return np.exp(logp)


def entropy_estimate(field: OdeField, latent: GaussianSpec, z_batch: np.ndarray,
                     steps: int = DEFAULT_STEPS) -> float:
    """Monte-Carlo E[log p(G(Z))]: the *negative* differential entropy."""
    z = np.atleast_2d(np.asarray(z_batch, dtype=np.float64))
    logp0 = latent.log_pdf(z)
    state, _ = integrate_forward(field, z, logp0, steps)
    return float(state.logp.mean())


class FlowTrainer:
    """Primal-dual training with the flow as generator and entropy regularization.

    Loss for the generator phase: mean cost + eta * dual scores + eps * mean log p(1);
    its z(1)/logp(1) cotangents seed the adjoint sweep.
    """

    def __init__(self, field: OdeField, duals: list[nn.Mlp], cost,
                 datasets: list[EmpiricalDataset], config: TrainConfig,
                 eps: float = 0.0, steps: int = DEFAULT_STEPS,
                 latent: GaussianSpec | None = None, adjoint_mode: str = "checkpoint"):
        if len(duals) != 2 or len(datasets) != 2:
            raise ShapeError("density training couples exactly two marginals")
        if datasets[0].dim != field.dim_x or datasets[1].dim != field.dim_y:
            raise ShapeError("dataset dims do not match the field split")
        self.field = field
        self.duals = duals
        self.cost = cost
        self.datasets = datasets
        self.config = config
        self.eps = eps
        self.steps = steps
        self.adjoint_mode = adjoint_mode
        self.latent = latent if latent is not None else standard_latent(field.dim)
        self.root = Rng(config.seed)
        self.opt_field = make_optimizer(config.optimizer, field.parameters(), config.lr,
                                        names=[f"field.p{i}"
                                               for i in range(len(field.parameters()))])
        self.opt_duals = [
            make_optimizer(config.optimizer, d.parameters(), config.lr,
                           names=[f"dual{i}.p{j}" for j in range(len(d.parameters()))])
            for i, d in enumerate(duals)
        ]
        self.iteration = 0
        self.wd_ema = float("nan")
        self.last_entropy = float("nan")

    def _split(self, z1: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return z1[:, :self.field.dim_x], z1[:, self.field.dim_x:]

    def generated(self, n: int, rng: Rng) -> tuple[np.ndarray, np.ndarray]:
        z = self.latent.sample(n, rng)
        state, _ = integrate_forward(self.field, z, None, self.steps)
        return self._split(state.z)

    def step(self) -> StepDiagnostics:
        cfg = self.config
        rng = self.root.substream(2 * self.iteration)
        dual_vals = [float("nan"), float("nan")]
        for _ in range(cfg.n_critic):
            real = [minibatch(ds, cfg.batch_size, rng) for ds in self.datasets]
            z = self.latent.sample(cfg.batch_size, rng)
            state, _ = integrate_forward(self.field, z, None, self.steps)
            gen = self._split(state.z)
            for i in range(2):
                with T.Graph():
                    obj = discriminator_objective_net(self.duals[i], cfg.eta,
                                                      gen[i], real[i])
                    val = obj.item()
                    self.opt_duals[i].zero_grad()
                    T.backward(obj)
                self._guard(val, f"dual {i} objective")
                self.opt_duals[i].ascend_step()
                dual_vals[i] = val / cfg.eta if cfg.eta > 0 else val

        # generator phase: forward with checkpoints, terminal cotangents, adjoint sweep
        z = self.latent.sample(cfg.batch_size, rng)
        with_logp = self.eps != 0.0
        logp0 = self.latent.log_pdf(z) if with_logp else None
        state, checkpoints = integrate_forward(self.field, z, logp0, self.steps,
                                               keep_checkpoints=True)
        b = z.shape[0]
        z1_leaf = T.Tensor(state.z, requires_grad=True)
        with T.Graph() as g:
            bx = T.narrow(z1_leaf, 1, 0, self.field.dim_x)
            by = T.narrow(z1_leaf, 1, self.field.dim_x, self.field.dim_y)
            cost_rows = self.cost(bx, by)
            cost_term = T.tmean(cost_rows)
            obj = cost_term
            for i, block in enumerate((bx, by)):
                obj = T.add(obj, T.mul(T.constant(cfg.eta), T.tmean(self.duals[i](block))))
            obj_val = obj.item()
            cost_val = cost_term.item()
            g.backward_from([(obj, np.ones(()))])
        self._guard(obj_val, "generator objective")
        a_z = z1_leaf.grad
        a_p = np.full(b, self.eps / b) if with_logp else None
        if with_logp:
            self.last_entropy = float(state.logp.mean())
        T.zero_grad(self.field.parameters())
        adjoint_backward(self.field, checkpoints, state, a_z, a_p,
                         steps=self.steps, mode=self.adjoint_mode)
        self.opt_field.step()

        if self.iteration == 0 or np.isnan(self.wd_ema):
            self.wd_ema = cost_val
        else:
            dcy = cfg.ema_decay
            self.wd_ema = dcy * self.wd_ema + (1.0 - dcy) * cost_val
        diag = StepDiagnostics(self.iteration, cost_val, tuple(dual_vals),
                               cost_val, self.wd_ema)
        self.iteration += 1
        return diag

    def _guard(self, value, what):
        if not np.isfinite(value) or abs(value) > self.config.divergence_limit:
            raise DivergenceError(f"{what} diverged at iteration {self.iteration}: {value}",
                                  diagnostics={"iteration": self.iteration, "value": value})

    def run(self, on_eval=None) -> list[StepDiagnostics]:
        out = []
        for _ in range(self.config.iterations - self.iteration):
            diag = self.step()
            out.append(diag)
            if on_eval is not None and diag.iteration % self.config.eval_every == 0:
                on_eval(diag)
        return out

    def entropy(self, n: int, rng: Rng) -> float:
        return entropy_estimate(self.field, self.latent, self.latent.sample(n, rng),
                                self.steps)

    # ---- persistence ----

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = nn.state_arrays(self.field.net, "field")
        for i, d in enumerate(self.duals):
            out.update(nn.state_arrays(d, f"dual{i}"))
        out.update(self.opt_field.state_arrays("opt_field"))
        for i, opt in enumerate(self.opt_duals):
            out.update(opt.state_arrays(f"opt_dual{i}"))
        out["trainer.iteration"] = np.array([float(self.iteration)])
        out["trainer.wd_ema"] = np.array([self.wd_ema])
        out["trainer.seed"] = np.array([float(self.config.seed)])
        return out

    def load_state_arrays(self, blocks: dict[str, np.ndarray]) -> None:
        nn.load_state_arrays(self.field.net, "field", blocks)
        for i, d in enumerate(self.duals):
            nn.load_state_arrays(d, f"dual{i}", blocks)
        self.opt_field.load_state_arrays("opt_field", blocks)
        for i, opt in enumerate(self.opt_duals):
            opt.load_state_arrays(f"opt_dual{i}", blocks)
        self.iteration = int(blocks["trainer.iteration"][0])
        self.wd_ema = float(blocks["trainer.wd_ema"][0])


def train_density(field: OdeField, duals: list[nn.Mlp], datasets: list[EmpiricalDataset],
                  cost, eps: float, eta: float, config: TrainConfig,
                  steps: int = DEFAULT_STEPS, on_eval=None) -> FlowTrainer:
    """Algorithm's loop with the flow generator; returns the trained FlowTrainer."""
    cfg = config
    if cfg.eta != eta:
        cfg = TrainConfig(**{**config.__dict__, "eta": eta})
    t = FlowTrainer(field, duals, cost, datasets, cfg, eps=eps, steps=steps)
    t.run(on_eval=on_eval)
    return t
