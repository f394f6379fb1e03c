"""Training loop for the flow: Adam, decoupled weight decay, early stopping.

Defaults follow the regimen used for the reference segmentation setup:
learning rate 2e-4, beta1 = 0.8, beta2 = 0.999, weight decay 1e-5, and no
upper epoch limit. A 90/10 train/validation split is carved from the clean
training features; no perturbed data is ever seen during training.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from . import flow as flowmod
from .numerics import make_rng


class DivergenceError(FloatingPointError):
    """Training NLL became non-finite."""


@dataclass
class TrainConfig:
    learning_rate: float = 2e-4
    beta1: float = 0.8
    beta2: float = 0.999
    epsilon: float = 1e-8
    weight_decay: float = 1e-5
    batch_size: int = 64
    early_stop_patience: int = 10
    max_epochs: int | None = None
    seed: int = 0
    val_fraction: float = 0.1

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("betas must lie in [0, 1)")
        if self.early_stop_patience < 1:
            raise ValueError("early_stop_patience must be >= 1")

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        return cls(**doc)


@dataclass
class EpochStats:
    epoch: int
    train_nll: float
    val_nll: float
    seconds: float


@dataclass
class TrainHistory:
    epochs: list[EpochStats] = field(default_factory=list)
    best_epoch: int = -1

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["epoch", "train_nll", "val_nll", "seconds"])
            for e in self.epochs:
                writer.writerow([e.epoch, f"{e.train_nll:.6f}", f"{e.val_nll:.6f}", f"{e.seconds:.3f}"])


@dataclass
class AdamState:
    m: list[dict[str, np.ndarray]]
    v: list[dict[str, np.ndarray]]
    t: int = 0

    @classmethod
    def for_params(cls, params: flowmod.FlowParams) -> "AdamState":
        zeros = lambda blocks: [{k: np.zeros_like(a) for k, a in blk.items()} for blk in blocks]
        return cls(m=zeros(params.blocks), v=zeros(params.blocks))


def adam_step(params: flowmod.FlowParams, grads, state: AdamState, config: TrainConfig) -> None:
    """Bias-corrected Adam update with decoupled weight decay, in place.

    The decay term lr * wd * p is subtracted after the Adam term rather
    than folded into the gradient.
    """
    state.t += 1
    b1, b2 = config.beta1, config.beta2
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    for i, blk in enumerate(params.blocks):
        for name, p in blk.items():
            g = grads[i][name]
            if not np.all(np.isfinite(g)):
                raise DivergenceError(f"non-finite gradient for {name} in block {i}")
            m = state.m[i][name]
            v = state.v[i][name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p -= config.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + config.epsilon)
            if config.weight_decay:
                p -= config.learning_rate * config.weight_decay * p


def train(features: np.ndarray, config: TrainConfig, spec: flowmod.FlowSpec):
    """Fit flow parameters to a (N, D) feature matrix.

    Returns (params, history) where params are those of the best
    validation epoch. Deterministic given (features, config, spec).
    """
    x = np.asarray(features, dtype=np.float64)
    if len(x) < 2 * config.batch_size:
        raise ValueError(f"need at least {2 * config.batch_size} feature vectors, got {len(x)}")

    rng = make_rng(config.seed, stream=2)
    order = rng.permutation(len(x))
    n_val = max(1, int(round(config.val_fraction * len(x))))
    val_x = x[order[:n_val]]
    train_x = x[order[n_val:]]

    params = flowmod.init_params(spec, seed=config.seed)
    params = flowmod.actnorm_init(params, train_x[: config.batch_size])
    state = AdamState.for_params(params)

    history = TrainHistory()
    best_val = np.inf
    best_params = params.copy()
    since_best = 0
    epoch = 0
    while True:
        t0 = time.perf_counter()
        idx = rng.permutation(len(train_x))
        nlls = []
        for start in range(0, len(train_x), config.batch_size):
            batch = train_x[idx[start : start + config.batch_size]]
            try:
                grads, nll = flowmod.nll_grad(params, batch)
            except flowmod.NumericalOverflowError as exc:
                raise DivergenceError(
                    f"training diverged at epoch {epoch}, batch {start // config.batch_size}: {exc}"
                ) from exc
            if not np.isfinite(nll):
                raise DivergenceError(f"training diverged at epoch {epoch}, batch {start // config.batch_size}")
            adam_step(params, grads, state, config)
            nlls.append(nll)
        val_nll = flowmod.nll_batch(params, val_x)
        if not np.isfinite(val_nll):
            raise DivergenceError(f"validation NLL non-finite at epoch {epoch}")
        history.epochs.append(EpochStats(epoch, float(np.mean(nlls)), val_nll, time.perf_counter() - t0))

        if val_nll < best_val:
            best_val = val_nll
            best_params = params.copy()
            history.best_epoch = epoch
            since_best = 0
        else:
            since_best += 1
        epoch += 1
        if since_best >= config.early_stop_patience:
            break
        if config.max_epochs is not None and epoch >= config.max_epochs:
            break
    return best_params, history
