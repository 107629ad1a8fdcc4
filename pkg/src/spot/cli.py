"""Config-driven experiment runner, persistence, and artifact emission.

Config grammar (documented in README): ``[section]`` headers and ``key = value``
lines; ``#`` starts a comment; values are scalars or comma lists. Every run
writes ``metrics.csv`` (one row per evaluation cadence), a final checkpoint,
and experiment-specific artifacts into the configured output directory.

Checkpoint format, little-endian throughout:
    magic ``SPOTCKPT`` | u32 version | u32 block count |
    blocks: u32 name length, name utf8, u32 ndim, u32 dims..., f64 payload.
"""

from __future__ import annotations

import os
import struct
import sys

import numpy as np

from . import adapt, flow, nn, oracle, tensor as T, trainer as tr
from .cost import (EuclideanCost, PairwiseSquaredCost, SobelEdgeCost,
                   SquaredEuclideanCost)
from .dist import (CurveSpec, EmpiricalDataset, GaussianSpec, MixtureSpec,
                   load_binary, load_csv, standard_latent)
from .errors import CheckpointError, ConfigError, SpotError
from .rng import Rng

CHECKPOINT_MAGIC = b"SPOTCKPT"
CHECKPOINT_VERSION = 1

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2


# ---- config parsing ----------------------------------------------------------


def parse_config(path: str) -> dict[str, dict[str, str]]:
    sections: dict[str, dict[str, str]] = {}
    current: dict[str, str] | None = None
    try:
        lines = open(path, "r", encoding="utf-8").read().splitlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}")
    for lineno, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            name = line[1:-1].strip()
            if not name:
                raise ConfigError("empty section name", line=lineno)
            current = sections.setdefault(name, {})
            continue
        if "=" not in line:
            raise ConfigError(f"expected key = value, got {line!r}", line=lineno)
        if current is None:
            raise ConfigError("key outside any [section]", line=lineno)
        key, val = line.split("=", 1)
        key, val = key.strip(), val.strip()
        if not key:
            raise ConfigError("empty key", line=lineno)
        if key in current:
            raise ConfigError(f"duplicate key {key!r}", line=lineno)
        current[key] = val
    return sections


class Section:
    """Typed accessors over one config section with precise error text."""

    def __init__(self, name: str, values: dict[str, str]):
        self.name = name
        self.values = values

    def _raw(self, key: str, default=None, required: bool = False):
        if key in self.values:
            return self.values[key]
        if required:
            raise ConfigError(f"[{self.name}] missing required key {key!r}")
        return default

    def str(self, key: str, default=None, required=False):
        return self._raw(key, default, required)

    def int(self, key: str, default=None, required=False):
        raw = self._raw(key, None, required)
        if raw is None:
            return default
        try:
            return int(float(raw))
        except ValueError:
            raise ConfigError(f"[{self.name}] {key} = {raw!r} is not an integer")

    def float(self, key: str, default=None, required=False):
        raw = self._raw(key, None, required)
        if raw is None:
            return default
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"[{self.name}] {key} = {raw!r} is not a number")

    def floats(self, key: str, default=None, required=False):
        raw = self._raw(key, None, required)
        if raw is None:
            return default
        try:
            return [float(v) for v in raw.split(",") if v.strip() != ""]
        except ValueError:
            raise ConfigError(f"[{self.name}] {key} = {raw!r} is not a number list")

    def ints(self, key: str, default=None, required=False):
        vals = self.floats(key, None, required)
        if vals is None:
            return default
        return [int(v) for v in vals]

    def bool(self, key: str, default=False):
        raw = self._raw(key, None)
        if raw is None:
            return default
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"[{self.name}] {key} = {raw!r} is not a boolean")


def _section(cfg: dict, name: str, required=True) -> Section:
    if name not in cfg:
        if required:
            raise ConfigError(f"missing required section [{name}]")
        return Section(name, {})
    return Section(name, cfg[name])


def _parse_cov(sec: Section, dim: int):
    raw = sec.str("cov", "identity")
    if raw == "identity":
        return np.eye(dim)
    if raw.startswith("diag:"):
        return np.diag([float(v) for v in raw[5:].split(",")])
    if raw.startswith("rows:"):
        rows = [[float(v) for v in r.split(",")] for r in raw[5:].split(";")]
        return np.array(rows)
    try:
        return np.eye(dim) * float(raw)
    except ValueError:
        raise ConfigError(f"[{sec.name}] cov = {raw!r}: expected identity, a scalar, "
                          "diag:a,b or rows:a,b;c,d")


def build_marginal_spec(sec: Section):
    kind = sec.str("kind", required=True)
    if kind == "gaussian":
        mean = np.array(sec.floats("mean", required=True))
        return GaussianSpec(mean, _parse_cov(sec, mean.shape[0]))
    if kind == "mixture":
        raw = sec.str("components", required=True)
        comps = []
        for part in raw.split(";"):
            vals = [float(v) for v in part.split(",")]
            if len(vals) != 3:
                raise ConfigError(f"[{sec.name}] mixture component needs w,mean,var "
                                  f"(1-d), got {part!r}")
            w, m, var = vals
            comps.append((w, GaussianSpec([m], np.array([[var]]))))
        return MixtureSpec(comps)
    if kind == "curve":
        return CurveSpec()
    raise ConfigError(f"[{sec.name}] unknown marginal kind {kind!r}")


def build_dataset(sec: Section, rng: Rng) -> EmpiricalDataset:
    kind = sec.str("kind", required=True)
    if kind in ("file_csv", "file_bin"):
        path = sec.str("path", required=True)
        if not os.path.exists(path):
            raise ConfigError(f"[{sec.name}] dataset file not found: {path}")
        if kind == "file_csv":
            return load_csv(path, labeled=sec.bool("labeled", False))
        return load_binary(path)
    spec = build_marginal_spec(sec)
    n = sec.int("n_samples", required=True)
    return EmpiricalDataset(spec.sample(n, rng))


def build_cost(sec: Section):
    kind = sec.str("kind", "euclidean")
    if kind == "euclidean":
        return EuclideanCost()
    if kind == "squared_euclidean":
        return SquaredEuclideanCost()
    if kind == "pairwise_squared":
        return PairwiseSquaredCost()
    if kind == "sobel":
        return SobelEdgeCost(sec.int("channels", 1), sec.int("height", required=True),
                             sec.int("width", required=True))
    raise ConfigError(f"[{sec.name}] unknown cost kind {kind!r}")


# ---- checkpoint io -------------------------------------------------------------


def save_checkpoint(path: str, blocks: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blocks)))
        for name in sorted(blocks):
            arr = np.ascontiguousarray(np.atleast_1d(blocks[name]), dtype="<f8")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path: str) -> dict[str, np.ndarray]:
    try:
        data = open(path, "rb").read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint: {exc}")
    off = 0

    def take(n, what):
        nonlocal off
        if off + n > len(data):
            raise CheckpointError(f"truncated while reading {what}", offset=off)
        out = data[off:off + n]
        off += n
        return out

    if take(8, "magic") != CHECKPOINT_MAGIC:
        raise CheckpointError("bad magic; not a checkpoint file", offset=0)
    version, count = struct.unpack("<II", take(8, "header"))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unknown checkpoint version {version}", offset=8)
    blocks: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<I", take(4, "name length"))
        name = take(name_len, "name").decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4, "ndim"))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, "shape"))
        n_items = int(np.prod(shape)) if shape else 1
        payload = take(8 * n_items, f"payload of {name}")
        blocks[name] = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(shape)
    return blocks


# ---- artifact emission -----------------------------------------------------------


def emit_heatmap(grid: np.ndarray, path: str) -> None:
    """8-bit binary PGM (P5), min-max normalized; constant grids map to 128."""
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 2 or grid.size == 0:
        raise SpotError(f"heatmap needs a non-empty 2-d grid, got shape {grid.shape}")
    lo, hi = grid.min(), grid.max()
    if hi > lo:
        pix = np.round((grid - lo) / (hi - lo) * 255.0).astype(np.uint8)
    else:
        pix = np.full(grid.shape, 128, dtype=np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{grid.shape[1]} {grid.shape[0]}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


class MetricsWriter:
    def __init__(self, path: str, columns: list[str]):
        self.fh = open(path, "w", encoding="utf-8")
        self.fh.write(",".join(columns) + "\n")

    def row(self, values) -> None:
        self.fh.write(",".join(_fmt(v) for v in values) + "\n")

    def close(self) -> None:
        self.fh.close()


def _prepare_outdir(out: str, force: bool) -> None:
    if os.path.exists(out) and os.listdir(out) and not force:
        raise ConfigError(f"output directory {out!r} exists and is not empty "
                          "(pass --force to overwrite)")
    os.makedirs(out, exist_ok=True)


# ---- experiment runners ------------------------------------------------------------


def _common_train_config(cfg: dict, seed: int, iterations: int) -> tr.TrainConfig:
    t = _section(cfg, "train", required=False)
    run = _section(cfg, "run")
    return tr.TrainConfig(
        iterations=iterations,
        batch_size=t.int("batch_size", 100),
        n_critic=t.int("n_critic", 5),
        lr=t.float("lr", 1e-4),
        eta=t.float("eta", 1e4),
        seed=seed,
        eval_every=run.int("eval_every", 200),
        eval_samples=run.int("eval_samples", 2000),
        optimizer=t.str("optimizer", "adam"),
    )


def _build_coupling_trainer(cfg: dict, marginal_names: list[str]) -> tr.Trainer:
    run = _section(cfg, "run")
    seed = run.int("seed", required=True)
    model_sec = _section(cfg, "model", required=False)
    data_rng = Rng(seed).substream(tr.TAG_DATA)
    datasets = [build_dataset(_section(cfg, nm), data_rng) for nm in marginal_names]
    dims = [ds.dim for ds in datasets]
    cost = build_cost(_section(cfg, "cost", required=False))
    gen_widths = model_sec.ints("gen_widths", [8, 8])
    dual_widths = model_sec.ints("dual_widths", [8])
    latent_dim = model_sec.int("latent_dim", max(dims))
    mode = model_sec.str("generator_mode", "separate")
    slope = model_sec.float("leaky_slope", 0.01)
    symmetric = model_sec.bool("symmetric_init", False)
    init = Rng(seed).substream(tr.TAG_INIT)
    nets = []
    if mode == "separate":
        for i, d in enumerate(dims):
            gen_rng = (Rng(seed).substream(tr.TAG_INIT).substream(100) if symmetric
                       else init.substream(100 + i))
            nets.append(nn.init_weights(
                nn.MlpSpec([latent_dim, *gen_widths, d], leaky_slope=slope), gen_rng))
    else:
        out_w = sum(dims) if mode == "joint" else dims[0]
        nets.append(nn.init_weights(nn.MlpSpec([latent_dim, *gen_widths, out_w],
                                               leaky_slope=slope), init.substream(100)))
    duals = [nn.init_weights(nn.MlpSpec([d, *dual_widths, 1], spectral=True,
                                        leaky_slope=slope), init.substream(200 + i))
             for i, d in enumerate(dims)]
    train_cfg = _common_train_config(cfg, seed, run.int("iterations", required=True))
    model = tr.SpotModel(tr.GeneratorBundle(nets, dims, mode), duals, cost,
                         standard_latent(latent_dim), train_cfg.eta)
    return tr.Trainer(model, datasets, train_cfg)


def _marginal_sections(cfg: dict) -> list[str]:
    if "x" in cfg and "y" in cfg:
        return ["x", "y"]
    names = sorted(n for n in cfg if n.startswith("x") and n[1:].isdigit())
    if len(names) < 2:
        raise ConfigError("expected sections [x] and [y], or [x1], [x2], ...")
    return names


def run_coupling(cfg: dict, out: str) -> int:
    names = _marginal_sections(cfg)
    t = _build_coupling_trainer(cfg, names)
    run = _section(cfg, "run")
    dual_cols = [f"dual_{chr(ord('x') + i)}" if len(names) == 2 else f"dual_{i}"
                 for i in range(len(names))]
    metrics = MetricsWriter(os.path.join(out, "metrics.csv"),
                            ["iteration", "wd_ema", *dual_cols, "cost_term"])
    t.run(on_eval=lambda d: metrics.row([d.iteration, d.wd_ema, *d.duals, d.cost_term]))
    metrics.close()
    plan_rows = run.int("plan_samples", 2000)
    plan = tr.sample_plan(t.model, plan_rows, t.root.substream(tr.TAG_EVAL))
    np.savetxt(os.path.join(out, "plan_samples.csv"), plan, delimiter=",", fmt="%.17g")
    save_checkpoint(os.path.join(out, "checkpoint.spotckpt"), t.state_arrays())
    print(f"done: iteration={t.iteration} wd_ema={t.wd_ema:.6f}")
    return EXIT_OK


def _build_flow_trainer(cfg: dict) -> flow.FlowTrainer:
    run = _section(cfg, "run")
    seed = run.int("seed", required=True)
    fsec = _section(cfg, "flow", required=False)
    model_sec = _section(cfg, "model", required=False)
    data_rng = Rng(seed).substream(tr.TAG_DATA)
    datasets = [build_dataset(_section(cfg, nm), data_rng) for nm in ("x", "y")]
    dims = [ds.dim for ds in datasets]
    cost = build_cost(_section(cfg, "cost", required=False))
    init = Rng(seed).substream(tr.TAG_INIT)
    hidden = fsec.ints("hidden", [64, 64, 64])
    field = flow.OdeField(
        nn.init_weights(nn.MlpSpec([sum(dims) + 1, *hidden, sum(dims)],
                                   activation="tanh"), init.substream(100)),
        dims[0], dims[1])
    dual_widths = model_sec.ints("dual_widths", [32])
    duals = [nn.init_weights(nn.MlpSpec([d, *dual_widths, 1], spectral=True),
                             init.substream(200 + i)) for i, d in enumerate(dims)]
    train_cfg = _common_train_config(cfg, seed, run.int("iterations", required=True))
    return flow.FlowTrainer(field, duals, cost, datasets, train_cfg,
                            eps=fsec.float("eps", 0.0),
                            steps=fsec.int("steps", flow.DEFAULT_STEPS))


def _parse_grid(spec: str):
    parts = spec.split(",")
    if len(parts) != 2:
        raise ConfigError(f"grid spec needs two axes 'x0:x1:nx,y0:y1:ny', got {spec!r}")
    axes = []
    for p in parts:
        bits = p.split(":")
        if len(bits) != 3:
            raise ConfigError(f"bad grid axis {p!r}")
        axes.append(np.linspace(float(bits[0]), float(bits[1]), int(bits[2])))
    return axes


def _emit_density_artifacts(ft: flow.FlowTrainer, grid_spec: str, out: str) -> None:
    xs, ys = _parse_grid(grid_spec)
    gx, gy = np.meshgrid(xs, ys)
    pts = np.stack([gx.reshape(-1), gy.reshape(-1)], axis=1)
    dens = np.empty(pts.shape[0])
    chunk = 20_000
    for i in range(0, pts.shape[0], chunk):
        dens[i:i + chunk] = flow.push_density(ft.field, pts[i:i + chunk], ft.latent,
                                              ft.steps)
    grid = dens.reshape(len(ys), len(xs))
    with open(os.path.join(out, "density_grid.csv"), "w", encoding="utf-8") as fh:
        fh.write("x,y,p\n")
        for j in range(len(ys)):
            for i in range(len(xs)):
                fh.write(f"{_fmt(xs[i])},{_fmt(ys[j])},{_fmt(grid[j, i])}\n")
    emit_heatmap(grid, os.path.join(out, "density.pgm"))


def run_density(cfg: dict, out: str) -> int:
    ft = _build_flow_trainer(cfg)
    run = _section(cfg, "run")
    metrics = MetricsWriter(os.path.join(out, "metrics.csv"),
                            ["iteration", "wd_ema", "dual_x", "dual_y", "cost_term",
                             "entropy"])
    ft.run(on_eval=lambda d: metrics.row([d.iteration, d.wd_ema, *d.duals, d.cost_term,
                                          ft.last_entropy]))
    metrics.close()
    grid_spec = _section(cfg, "flow", required=False).str("grid", "-4:4:120,-4:4:120")
    _emit_density_artifacts(ft, grid_spec, out)
    save_checkpoint(os.path.join(out, "checkpoint.spotckpt"), ft.state_arrays())
    print(f"done: iteration={ft.iteration} wd_ema={ft.wd_ema:.6f}")
    return EXIT_OK


def run_daspot(cfg: dict, out: str) -> int:
    run = _section(cfg, "run")
    da_sec = _section(cfg, "da", required=False)
    seed = run.int("seed", required=True)
    da_cfg = adapt.DaConfig(
        iterations=run.int("iterations", required=True),
        warmup_iterations=da_sec.int("warmup_iterations", 2000),
        eta_s=da_sec.float("eta_s", 1e3),
        eta_da=da_sec.float("eta_da", 10.0),
        eta=da_sec.float("eta", 1e3),
        batch_size=da_sec.int("batch_size", 128),
        n_critic=da_sec.int("n_critic", 5),
        lr=da_sec.float("lr", 1e-4),
        seed=seed,
        eval_every=run.int("eval_every", 200),
    )
    task = da_sec.str("task", "rotated_blobs")
    if task != "rotated_blobs":
        raise ConfigError(f"[da] unknown task {task!r}")
    src, tgt = adapt.make_rotated_blobs_task(da_sec.int("n_source", 2000),
                                             da_sec.int("n_target", 2000), seed=seed)
    gens, duals, d_x, d_y = adapt.build_da_models(da_cfg)
    t = adapt.DaTrainer(gens, duals, d_x, d_y, src, tgt, da_cfg)
    metrics = MetricsWriter(os.path.join(out, "metrics.csv"),
                            ["iteration", "source_acc", "target_acc", "wd_ema"])

    def on_eval(d):
        sa, ta = t.accuracies()
        metrics.row([d.iteration, sa, ta, d.wd_ema])

    t.run(on_eval=on_eval)
    metrics.close()
    save_checkpoint(os.path.join(out, "checkpoint.spotckpt"), t.state_arrays())
    sa, ta = t.accuracies()
    print(f"done: iteration={t.iteration} source_acc={sa:.4f} target_acc={ta:.4f}")
    return EXIT_OK


RUNNERS = {
    "wd": run_coupling,
    "pairs": run_coupling,
    "multi": run_coupling,
    "density": run_density,
    "daspot": run_daspot,
}


def run(cfg_path: str, force: bool = False, out_override: str | None = None) -> int:
    cfg = parse_config(cfg_path)
    run_sec = _section(cfg, "run")
    kind = run_sec.str("kind", required=True)
    if kind not in RUNNERS:
        raise ConfigError(f"[run] unknown kind {kind!r} "
                          f"(expected one of {sorted(RUNNERS)})")
    if run_sec.int("seed", None) is None:
        raise ConfigError("[run] seed is mandatory")
    out = out_override or run_sec.str("out", required=True)
    _prepare_outdir(out, force)
    return RUNNERS[kind](cfg, out)


# ---- resume --------------------------------------------------------------------


def resume(ckpt_path: str, cfg_path: str, force: bool = False,
           out_override: str | None = None) -> int:
    cfg = parse_config(cfg_path)
    run_sec = _section(cfg, "run")
    kind = run_sec.str("kind", required=True)
    out = out_override or run_sec.str("out", required=True)
    _prepare_outdir(out, force)
    blocks = load_checkpoint(ckpt_path)
    if kind in ("wd", "pairs", "multi"):
        t = _build_coupling_trainer(cfg, _marginal_sections(cfg))
        t.load_state_arrays(blocks)
        names = _marginal_sections(cfg)
        dual_cols = [f"dual_{chr(ord('x') + i)}" if len(names) == 2 else f"dual_{i}"
                     for i in range(len(names))]
        metrics = MetricsWriter(os.path.join(out, "metrics.csv"),
                                ["iteration", "wd_ema", *dual_cols, "cost_term"])
        t.run(on_eval=lambda d: metrics.row([d.iteration, d.wd_ema, *d.duals,
                                             d.cost_term]))
        metrics.close()
        save_checkpoint(os.path.join(out, "checkpoint.spotckpt"), t.state_arrays())
        print(f"done: iteration={t.iteration} wd_ema={t.wd_ema:.6f}")
        return EXIT_OK
    if kind == "density":
        ft = _build_flow_trainer(cfg)
        ft.load_state_arrays(blocks)
        metrics = MetricsWriter(os.path.join(out, "metrics.csv"),
                                ["iteration", "wd_ema", "dual_x", "dual_y",
                                 "cost_term", "entropy"])
        ft.run(on_eval=lambda d: metrics.row([d.iteration, d.wd_ema, *d.duals,
                                              d.cost_term, ft.last_entropy]))
        metrics.close()
        grid_spec = _section(cfg, "flow", required=False).str("grid", "-4:4:120,-4:4:120")
        _emit_density_artifacts(ft, grid_spec, out)
        save_checkpoint(os.path.join(out, "checkpoint.spotckpt"), ft.state_arrays())
        return EXIT_OK
    raise ConfigError(f"resume not supported for kind {kind!r}")


def density_query(ckpt_path: str, cfg_path: str, grid_spec: str, out: str,
                  force: bool = False) -> int:
    cfg = parse_config(cfg_path)
    _prepare_outdir(out, force)
    ft = _build_flow_trainer(cfg)
    ft.load_state_arrays(load_checkpoint(ckpt_path))
    _emit_density_artifacts(ft, grid_spec, out)
    print(f"done: grid {grid_spec} -> {out}")
    return EXIT_OK


# ---- verify ---------------------------------------------------------------------


def _verify_gradients() -> list[tuple[str, float, float, bool]]:
    from .cost import EuclideanCost
    rows = []
    rng = Rng(606)
    # elementwise primitives vs central differences
    worst = 0.0
    for opname, op, ref in (
        ("exp", T.texp, np.exp), ("tanh", T.tanh, np.tanh), ("square", T.square, np.square),
        ("sigmoid", T.sigmoid, lambda v: 1 / (1 + np.exp(-v))),
    ):
        pts = rng.normal(50)
        x = T.Tensor(pts, requires_grad=True)
        with T.Graph():
            T.backward(op(x).sum())
        h = 1e-5
        fd = np.array([(np.sum(ref(pts + h * e)) - np.sum(ref(pts - h * e))) / (2 * h)
                       for e in np.eye(50)])
        worst = max(worst, float(np.max(np.abs(x.grad - fd) /
                                        np.maximum(np.abs(fd), 1e-6))))
    rows.append(("elementwise gradients vs finite differences", worst, 1e-4,
                 worst < 1e-4))
    # mlp parameter gradients
    net = nn.init_weights(nn.MlpSpec([2, 6, 6, 1], activation="tanh"), 5)
    x0 = rng.normal(8).reshape(4, 2)
    with T.Graph():
        T.backward(net(T.Tensor(x0)).sum())
    worst = 0.0
    for p in net.parameters():
        if not p.requires_grad:
            continue
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            h = 1e-5
            flat[i] = orig + h
            fp = float(net(T.Tensor(x0)).data.sum())
            flat[i] = orig - h
            fm = float(net(T.Tensor(x0)).data.sum())
            flat[i] = orig
            fd = (fp - fm) / (2 * h)
            worst = max(worst, abs(p.grad.reshape(-1)[i] - fd) / max(abs(fd), 1e-6))
    rows.append(("mlp parameter gradients vs finite differences", worst, 1e-4,
                 worst < 1e-4))
    # adjoint gradient
    fld = flow.OdeField.build(1, 1, hidden=[6], seed=9)
    params = [p for p in fld.parameters() if p.requires_grad]
    z0 = rng.normal(6).reshape(3, 2)
    lat = standard_latent(2)
    logp0 = lat.log_pdf(z0)
    eps = 0.5

    def loss_value():
        st, _ = flow.integrate_forward(fld, z0, logp0, 32)
        return float(np.mean(np.sum((st.z[:, :1] - st.z[:, 1:]) ** 2, axis=1))
                     + eps * st.logp.mean())

    st, cps = flow.integrate_forward(fld, z0, logp0, 32, keep_checkpoints=True)
    z1 = T.Tensor(st.z, requires_grad=True)
    with T.Graph() as g:
        dxy = T.sub(T.narrow(z1, 1, 0, 1), T.narrow(z1, 1, 1, 1))
        g.backward_from([(T.tmean(T.tsum(T.mul(dxy, dxy), axis=1)), np.ones(()))])
    T.zero_grad(params)
    flow.adjoint_backward(fld, cps, st, z1.grad, np.full(3, eps / 3), steps=32)
    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            h = 1e-4
            flat[i] = orig + h
            fp = loss_value()
            flat[i] = orig - h
            fm = loss_value()
            flat[i] = orig
            fd = (fp - fm) / (2 * h)
            worst = max(worst, abs(p.grad.reshape(-1)[i] - fd) / max(abs(fd), 1e-5))
    rows.append(("adjoint gradient vs finite differences", worst, 1e-3, worst < 1e-3))
    return rows


def _verify_density() -> list[tuple[str, float, float, bool]]:
    net = nn.init_weights(nn.MlpSpec([3, 2]), 1)
    net.layers[0].weight.data[:] = 0.0
    fld = flow.OdeField(net, 1, 1)
    lat = standard_latent(2)
    z0 = Rng(4).normal(16).reshape(8, 2)
    st, _ = flow.integrate_forward(fld, z0, lat.log_pdf(z0), 16)
    err_flow = float(np.max(np.abs(st.z - z0)) + np.max(np.abs(st.logp - lat.log_pdf(z0))))
    p = flow.push_density(fld, z0, lat, 16)
    err_push = float(np.max(np.abs(p - np.exp(lat.log_pdf(z0)))))
    return [("identity flow exactness", err_flow, 1e-12, err_flow < 1e-12),
            ("identity-flow density recovery", err_push, 1e-12, err_push < 1e-12)]


def _verify_oracle_equivalence() -> list[tuple[str, float, float, bool]]:
    # quick-train preset: 64+64 empirical 2-d points vs the Hungarian oracle
    rng = Rng(515)
    xs = GaussianSpec([-1.0, 0.0], np.eye(2) * 0.3).sample(64, rng)
    ys = GaussianSpec([1.0, 0.5], np.eye(2) * 0.3).sample(64, rng)
    cmat = np.linalg.norm(xs[:, None, :] - ys[None, :, :], axis=2)
    exact, _ = oracle.assignment_exact(cmat)
    ds = [EmpiricalDataset(xs), EmpiricalDataset(ys)]
    model = tr.build_model([2, 2], gen_widths=[16, 16], dual_widths=[16], eta=5e3,
                           seed=515, leaky_slope=0.2, symmetric_init=True)
    cfg = tr.TrainConfig(iterations=4000, batch_size=64, n_critic=5, lr=1e-3,
                         eta=5e3, seed=515)
    t = tr.Trainer(model, ds, cfg)
    for _ in range(cfg.iterations):
        d = t.step()
    rel = abs(d.wd_ema - exact) / exact
    return [("empirical WD vs Hungarian oracle (quick train)", rel, 0.10, rel < 0.10)]


VERIFY_SUITES = {
    "gradients": _verify_gradients,
    "density": _verify_density,
    "oracle": _verify_oracle_equivalence,
}


def verify(suite: str | None = None) -> int:
    names = [suite] if suite else ["gradients", "density", "oracle"]
    for name in names:
        if name not in VERIFY_SUITES:
            raise ConfigError(f"unknown verify suite {name!r} "
                              f"(expected one of {sorted(VERIFY_SUITES)})")
    all_ok = True
    print(f"{'check':<55} {'measured':>12} {'bound':>10} result")
    for name in names:
        for label, measured, bound, ok in VERIFY_SUITES[name]():
            all_ok &= ok
            print(f"{label:<55} {measured:>12.3e} {bound:>10.0e} "
                  f"{'pass' if ok else 'FAIL'}")
    return EXIT_OK if all_ok else EXIT_CHECK_FAILED


# ---- entry point -----------------------------------------------------------------


USAGE = """usage:
  spot run <config.cfg> [--force] [--out DIR]
  spot resume <checkpoint> <config.cfg> [--force] [--out DIR]
  spot verify [gradients|density|oracle]
  spot density-query <checkpoint> <config.cfg> <x0:x1:nx,y0:y1:ny> --out DIR [--force]
"""


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    threads = os.environ.get("SPOT_THREADS")
    if threads is not None:
        try:
            if int(threads) < 1:
                raise ValueError
        except ValueError:
            print(f"SPOT_THREADS must be a positive integer, got {threads!r}",
                  file=sys.stderr)
            return EXIT_USAGE
        # single-threaded engine: the cap is validated and trivially honored

    force = "--force" in argv
    argv = [a for a in argv if a != "--force"]
    out_override = None
    if "--out" in argv:
        i = argv.index("--out")
        if i + 1 >= len(argv):
            print(USAGE, file=sys.stderr)
            return EXIT_USAGE
        out_override = argv[i + 1]
        del argv[i:i + 2]
    if not argv:
        print(USAGE, file=sys.stderr)
        return EXIT_USAGE
    cmd, *rest = argv
    try:
        if cmd == "run" and len(rest) == 1:
            return run(rest[0], force=force, out_override=out_override)
        if cmd == "resume" and len(rest) == 2:
            return resume(rest[0], rest[1], force=force, out_override=out_override)
        if cmd == "verify" and len(rest) <= 1:
            return verify(rest[0] if rest else None)
        if cmd == "density-query" and len(rest) == 3:
            if out_override is None:
                print("density-query requires --out DIR", file=sys.stderr)
                return EXIT_USAGE
            return density_query(rest[0], rest[1], rest[2], out_override, force=force)
        print(USAGE, file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CheckpointError, SpotError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CHECK_FAILED


if __name__ == "__main__":
    sys.exit(main())
