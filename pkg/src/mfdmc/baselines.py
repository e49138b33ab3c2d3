"""FunkMF and BiasedMF trained with the same loop, optimizer and RMSE protocol."""

from __future__ import annotations

import copy
from dataclasses import dataclass, replace

import numpy as np

from .data import DatasetSplit, Ratings
from .optim import make_optimizer
from .trainer import TrainConfig, TrainReport, TrainingError, run_epochs

KINDS = ("funk", "biased")


@dataclass
class BaselineModel:
    kind: str
    P: np.ndarray
    Q: np.ndarray
    mu: float = 0.0
    b_user: np.ndarray | None = None
    b_item: np.ndarray | None = None
    range_min: float = 1.0
    range_max: float = 5.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown baseline kind {self.kind!r}; expected one of {KINDS}")
        if self.P.shape[1] != self.Q.shape[1]:
            raise ValueError("P and Q must share the latent dimension")
        if self.kind == "biased" and (self.b_user is None or self.b_item is None):
            raise ValueError("biased model needs user and item biases")

    @property
    def d(self) -> int:
        return self.P.shape[1]

    def predict(self, u: int, i: int) -> float:
        return float(self.predict_many(np.array([u]), np.array([i]))[0])

    def predict_many(self, users, items) -> np.ndarray:
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        out = np.einsum("kd,kd->k", self.P[users], self.Q[items])
        if self.kind == "biased":
            out = out + self.mu + self.b_user[users] + self.b_item[items]
        return out

    def parameters(self) -> dict[str, np.ndarray]:
        params = {"P": self.P, "Q": self.Q}
        if self.kind == "biased":
            params["bias.user"] = self.b_user
            params["bias.item"] = self.b_item
        return params

    def clone(self) -> "BaselineModel":
        return copy.deepcopy(self)


def init_baseline(kind: str, meta, d: int, seed: int) -> BaselineModel:
    """Factors ~ N(0, 0.1^2); biases zero; mu = meta.global_mean."""
    rng = np.random.default_rng(seed)
    P = rng.normal(0.0, 0.1, size=(meta.m, d))
    Q = rng.normal(0.0, 0.1, size=(meta.n, d))
    if kind == "biased":
        return BaselineModel(kind, P, Q, float(meta.global_mean), np.zeros(meta.m),
                             np.zeros(meta.n), meta.range_min, meta.range_max)
    return BaselineModel(kind, P, Q, range_min=meta.range_min, range_max=meta.range_max)


def baseline_loss(model: BaselineModel, batch: Ratings, lam: float) -> float:
    """Batch mean of (r - r_hat)^2 + lam (|q_i|^2 + |p_u|^2 [+ b_u^2 + b_i^2])."""
    err = model.predict_many(batch.users, batch.items) - batch.ratings
    p = model.P[batch.users]
    q = model.Q[batch.items]
    reg = np.einsum("kd,kd->k", p, p) + np.einsum("kd,kd->k", q, q)
    if model.kind == "biased":
        reg = reg + model.b_user[batch.users] ** 2 + model.b_item[batch.items] ** 2
    return float(np.mean(err * err + lam * reg))


def baseline_gradients(model: BaselineModel, batch: Ratings, lam: float) -> dict[str, np.ndarray]:
    B = len(batch)
    if B == 0:
        raise ValueError("empty rating batch")
    u, i = batch.users, batch.items
    p, q = model.P[u], model.Q[i]
    err = model.predict_many(u, i) - batch.ratings
    de = (2.0 / B) * err
    grads = {k: np.zeros_like(v) for k, v in model.parameters().items()}
    np.add.at(grads["P"], u, de[:, None] * q + (2.0 * lam / B) * p)
    np.add.at(grads["Q"], i, de[:, None] * p + (2.0 * lam / B) * q)
    if model.kind == "biased":
        np.add.at(grads["bias.user"], u, de + (2.0 * lam / B) * model.b_user[u])
        np.add.at(grads["bias.item"], i, de + (2.0 * lam / B) * model.b_item[i])
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in parameter block {k!r}")
    return grads


@dataclass(frozen=True)
class _StepLoss:
    loss3: float
    total: float
    loss1: float = 0.0
    loss2: float = 0.0
    eta: float = 0.0
    gamma: float = 0.0


def baseline_fit(split: DatasetSplit, kind: str, d: int, config: TrainConfig,
                 meta=None, model: BaselineModel | None = None) -> tuple[BaselineModel, TrainReport]:
    """Minibatch training of squared-error factorization; returns the best-validation model.

    ``config.lam`` is the factor (and bias) regularization weight; the loss
    coefficients and pruning fields of ``config`` are ignored.
    """
    if model is None:
        if meta is None:
            raise ValueError("meta or a model is required")
        model = init_baseline(kind, replace(meta, global_mean=split.global_mean), d, config.seed)
    opt = make_optimizer(config.optimizer, config.learning_rate, config.beta1,
                         config.beta2, config.epsilon)

    def step(batch, epoch_index):
        err = model.predict_many(batch.users, batch.items) - batch.ratings
        total = baseline_loss(model, batch, config.lam)
        opt.step(model.parameters(), baseline_gradients(model, batch, config.lam))
        return _StepLoss(loss3=float(np.mean(err * err)), total=total)

    report = run_epochs(model, split, config, step)
    return report.model, report
