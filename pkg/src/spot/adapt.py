"""Toy domain adaptation through a trained coupling.

Joint objective: the coupling loss under an embedding ground cost, plus
eta_s * source classification risk, plus eta_da * a pseudo-label risk that
asks the target classifier to agree with the source classifier on coupled
synthetic pairs. eta_da follows a two-phase schedule (0 during warm-up).

One step = one full coupling cycle (critics + generator descent, where the
generator descent also updates the embedding networks through the cost),
then a descent on D_X via the source risk and on D_Y via the target risk.
The classifier phases draw from their own substream, so with
eta_s = eta_da = 0 the step's generator/dual/embedding updates coincide
bit-for-bit with the plain coupling trainer's.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import nn, tensor as T
from .cost import EmbeddingCost
from .dist import EmpiricalDataset, GaussianSpec, minibatch_labeled, standard_latent
from .errors import DatasetError, ShapeError
from .optim import make_optimizer
from .rng import Rng
from .trainer import (GeneratorBundle, SpotModel, StepDiagnostics, TrainConfig,
                      Trainer, TAG_INIT)


@dataclass
class DaConfig:
    iterations: int
    warmup_iterations: int = 2000
    eta_s: float = 1e3
    eta_da: float = 10.0
    eta: float = 1e3
    batch_size: int = 128
    n_critic: int = 5
    lr: float = 1e-4
    seed: int = 0
    eval_every: int = 200
    optimizer: str = "adam"

    def __post_init__(self):
        if self.warmup_iterations > self.iterations:
            raise ShapeError("warm-up cannot exceed the iteration budget")


class Classifier:
    """Embedding network composed with a decision network producing K logits."""

    def __init__(self, embed: nn.Mlp, decide: nn.Mlp):
        if embed.out_dim != decide.in_dim:
            raise ShapeError(f"embedding width {embed.out_dim} != decision input "
                             f"{decide.in_dim}")
        self.embed = embed
        self.decide = decide

    @property
    def n_classes(self) -> int:
        return self.decide.out_dim

    def logits(self, x: T.Tensor) -> T.Tensor:
        return self.decide(self.embed(x))

    def parameters(self) -> list[T.Tensor]:
        return self.embed.parameters() + self.decide.parameters()


def cross_entropy(logits: T.Tensor, labels: np.ndarray) -> T.Tensor:
    """Mean softmax cross-entropy against integer labels (stable via detached row max)."""
    b, k = logits.shape
    labels = np.asarray(labels, dtype=np.int64)
    if np.any(labels < 0) or np.any(labels >= k):
        raise DatasetError(f"label outside [0, {k})")
    shift = np.repeat(logits.data.max(axis=1, keepdims=True), k, axis=1)
    sh = T.sub(logits, T.constant(shift))
    lse = T.tlog(T.tsum(T.texp(sh), axis=1))
    onehot = np.zeros((b, k))
    onehot[np.arange(b), labels] = 1.0
    picked = T.tsum(T.mul(sh, T.constant(onehot)), axis=1)
    return T.tmean(T.sub(lse, picked))


def source_risk(classifier: Classifier, x: T.Tensor, labels: np.ndarray) -> T.Tensor:
    """Mean cross-entropy of the source classifier on labeled source samples."""
    return cross_entropy(classifier.logits(x), labels)


def pseudo_labels(classifier: Classifier, x_np: np.ndarray) -> np.ndarray:
    """argmax of the source classifier's logits; ties break to the lowest index.

    Evaluated outside any graph: the pseudo-label is a discrete target and
    carries no gradient.
    """
    return np.argmax(classifier.logits(T.Tensor(x_np)).data, axis=1)


def target_risk(d_x: Classifier, d_y: Classifier, gen_x_np: np.ndarray,
                gen_y_np: np.ndarray) -> T.Tensor:
    """Cross-entropy of D_Y on coupled synthetic pairs against D_X's pseudo-labels."""
    pseudo = pseudo_labels(d_x, gen_x_np)
    return cross_entropy(d_y.logits(T.Tensor(gen_y_np)), pseudo)


def accuracy_eval(classifier: Classifier, dataset: EmpiricalDataset) -> float:
    """Fraction of argmax-logit predictions equal to the labels; ties to lowest index."""
    if dataset.labels is None:
        raise DatasetError("accuracy needs a labeled dataset")
    pred = np.argmax(classifier.logits(T.Tensor(dataset.samples)).data, axis=1)
    return float(np.mean(pred == dataset.labels))


class DaTrainer:
    """Couples source/target through the embedding cost and trains both classifiers."""

    def __init__(self, generators: GeneratorBundle, duals: list[nn.Mlp],
                 d_x: Classifier, d_y: Classifier,
                 source: EmpiricalDataset, target: EmpiricalDataset,
                 config: DaConfig, latent: GaussianSpec | None = None):
        if source.labels is None:
            raise DatasetError("source dataset must be labeled")
        self.d_x = d_x
        self.d_y = d_y
        self.config = config
        cost = EmbeddingCost(d_x.embed, d_y.embed)
        latent = latent if latent is not None else standard_latent(max(generators.dims))
        model = SpotModel(generators, duals, cost, latent, config.eta)
        inner_cfg = TrainConfig(iterations=config.iterations, batch_size=config.batch_size,
                                n_critic=config.n_critic, lr=config.lr, eta=config.eta,
                                seed=config.seed, eval_every=config.eval_every,
                                optimizer=config.optimizer)
        self.trainer = Trainer(model, [source, target], inner_cfg)
        self.source = source
        self.target = target
        self.opt_dx = make_optimizer(config.optimizer, d_x.parameters(), config.lr,
                                     names=[f"d_x.p{i}" for i in range(len(d_x.parameters()))])
        self.opt_dy = make_optimizer(config.optimizer, d_y.parameters(), config.lr,
                                     names=[f"d_y.p{i}" for i in range(len(d_y.parameters()))])

    @property
    def iteration(self) -> int:
        return self.trainer.iteration

    def eta_da_now(self, iteration: int) -> float:
        return 0.0 if iteration < self.config.warmup_iterations else self.config.eta_da

    def step(self) -> StepDiagnostics:
        cfg = self.config
        diag = self.trainer.step()
        crng = self.trainer.root.substream(2 * diag.iteration + 1)

        xb, labels = minibatch_labeled(self.source, cfg.batch_size, crng)
        with T.Graph():
            loss_s = T.mul(T.constant(cfg.eta_s), source_risk(self.d_x, T.Tensor(xb), labels))
            self.opt_dx.zero_grad()
            T.backward(loss_s)
        self.opt_dx.step()

        z = self.trainer.model.latent.sample(cfg.batch_size, crng)
        gen = self.trainer.model.generators.forward_np(z)
        with T.Graph():
            loss_t = T.mul(T.constant(self.eta_da_now(diag.iteration)),
                           target_risk(self.d_x, self.d_y, gen[0], gen[1]))
            self.opt_dy.zero_grad()
            T.backward(loss_t)
        self.opt_dy.step()
        return diag

    def run(self, on_eval=None) -> list[StepDiagnostics]:
        out = []
        for _ in range(self.config.iterations - self.trainer.iteration):
            diag = self.step()
            out.append(diag)
            if on_eval is not None and diag.iteration % self.config.eval_every == 0:
                on_eval(diag)
        return out

    def accuracies(self) -> tuple[float, float]:
        return accuracy_eval(self.d_x, self.source), accuracy_eval(self.d_y, self.target)

    # ---- persistence ----

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = self.trainer.state_arrays()
        for name, net in (("dx_embed", self.d_x.embed), ("dx_decide", self.d_x.decide),
                          ("dy_embed", self.d_y.embed), ("dy_decide", self.d_y.decide)):
            out.update(nn.state_arrays(net, name))
        out.update(self.opt_dx.state_arrays("opt_dx"))
        out.update(self.opt_dy.state_arrays("opt_dy"))
        return out

    def load_state_arrays(self, blocks: dict[str, np.ndarray]) -> None:
        self.trainer.load_state_arrays(blocks)
        for name, net in (("dx_embed", self.d_x.embed), ("dx_decide", self.d_x.decide),
                          ("dy_embed", self.d_y.embed), ("dy_decide", self.d_y.decide)):
            nn.load_state_arrays(net, name, blocks)
        self.opt_dx.load_state_arrays("opt_dx", blocks)
        self.opt_dy.load_state_arrays("opt_dy", blocks)


def make_rotated_blobs_task(n_source: int, n_target: int, seed: int,
                            angle_deg: float = 35.0,
                            shift=(1.25, 0.0)) -> tuple[EmpiricalDataset, EmpiricalDataset]:
    """Two labeled 2-d blobs; the target domain is the source rotated and shifted.

    The shift puts one target blob across the source decision boundary so a
    source-only classifier generalizes poorly, while the nearest-blob
    correspondence stays label-correct.
    """
    rng = Rng(seed)
    blob = [GaussianSpec([1.5, 0.0], np.eye(2) * 0.16),
            GaussianSpec([-1.5, 0.0], np.eye(2) * 0.16)]
    th = np.deg2rad(angle_deg)
    rot = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
    shift = np.asarray(shift, dtype=np.float64)

    def domain(n, transform):
        half = n // 2
        xs, labels = [], []
        for lab, count in ((0, half), (1, n - half)):
            pts = blob[lab].sample(count, rng)
            xs.append(transform(pts))
            labels.append(np.full(count, lab, dtype=np.int64))
        return EmpiricalDataset(np.concatenate(xs), np.concatenate(labels))

    source = domain(n_source, lambda p: p)
    target = domain(n_target, lambda p: p @ rot.T + shift)
    return source, target


def build_da_models(config: DaConfig, embed_width: int = 16, embed_dim: int = 8,
                    gen_width: int = 32, dual_width: int = 32,
                    n_classes: int = 2,
                    leaky_slope: float = 0.2) -> tuple[GeneratorBundle, list[nn.Mlp],
                                                       Classifier, Classifier]:
    """Standard toy wiring: 2-d domains, tanh embeddings, leaky-relu generators.

    Generators and the two embeddings start from shared draws (separate
    parameters, identical values): the coupling begins at the diagonal and the
    warm-up cost is a true metric in one shared embedding space, which keeps
    the blob correspondence label-correct instead of leaving it to a random
    target embedding.
    """
    def init():
        return Rng(config.seed).substream(TAG_INIT)

    gens = [nn.init_weights(nn.MlpSpec([2, gen_width, gen_width, 2],
                                       leaky_slope=leaky_slope),
                            init().substream(100)) for _ in range(2)]
    duals = [nn.init_weights(nn.MlpSpec([2, dual_width, 1], spectral=True,
                                        leaky_slope=leaky_slope),
                             init().substream(200 + i)) for i in range(2)]
    classifiers = []
    for i in range(2):
        embed = nn.init_weights(nn.MlpSpec([2, embed_width, embed_dim], activation="tanh"),
                                init().substream(300))
        decide = nn.init_weights(nn.MlpSpec([embed_dim, embed_width, n_classes],
                                            activation="tanh"),
                                 init().substream(400 + i))
        classifiers.append(Classifier(embed, decide))
    return GeneratorBundle(gens, [2, 2]), duals, classifiers[0], classifiers[1]
