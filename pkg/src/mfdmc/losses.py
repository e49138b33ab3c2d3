"""Objective terms for MFDMC.

Forward definitions only; the hand-derived backward pass lives in
:mod:`mfdmc.trainer`. Entity-level terms (proximity, entropy, weight decay)
are means over the entities passed in, so their scale does not depend on
batch size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import SIDES

E = math.e
WEIGHT_LOSSES = ("mapped-entropy", "uniform-offset")


def squared_distance(ca, cb) -> float:
    ca = np.asarray(ca, dtype=np.float64)
    cb = np.asarray(cb, dtype=np.float64)
    if ca.shape != cb.shape:
        raise ValueError(f"length mismatch: {ca.shape} vs {cb.shape}")
    diff = ca - cb
    return float(diff @ diff)


def minmax_normalize_view(centers: np.ndarray) -> np.ndarray:
    """Scale a view's whole center matrix into [0, 1]; constant input maps to zeros."""
    centers = np.asarray(centers, dtype=np.float64)
    if centers.size == 0:
        raise ValueError("empty center matrix")
    lo, hi = centers.min(), centers.max()
    if hi == lo:
        return np.zeros_like(centers)
    return (centers - lo) / (hi - lo)


def pairwise_hinge(ca, cb, rho: float) -> float:
    return max(0.0, rho - squared_distance(ca, cb))


def _view_spread(centers: np.ndarray, rho: float) -> float:
    if len(centers) < 2:
        return 0.0
    cn = minmax_normalize_view(centers)
    a, bb = np.triu_indices(len(cn), k=1)
    diff = cn[a] - cn[bb]
    return float(np.maximum(0.0, rho - np.einsum("pk,pk->p", diff, diff)).sum())


def spread_loss(bank, rho: float) -> float:
    """Hinge penalty over unordered center pairs of each normalized view."""
    return sum(_view_spread(c, rho) for c in bank.views)


def assign_cluster(model, side: str, entity: int, view: int) -> int:
    # np.argmax returns the first maximum, which is the lowest-index tie rule
    return int(np.argmax(model.view_weights(side, entity, view)))


def _as_batch(entities) -> np.ndarray:
    entities = np.asarray(entities, dtype=np.int64).reshape(-1)
    if entities.size == 0:
        raise ValueError("empty entity batch")
    return entities


def proximity_loss(model, side: str, entities) -> float:
    entities = _as_batch(entities)
    bank = model.banks[side]
    total = 0.0
    for j in range(model.config.v):
        w = model.weights(side, entities, j)
        sub = w @ bank.views[j]
        diff = bank.views[j][np.argmax(w, axis=1)] - sub
        total += float(np.einsum("kb,kb->", diff, diff))
    return total / len(entities)


def map_weight(w, t: int):
    """Piecewise-linear remap sending 0 -> 0, 1/t -> 1/e and 1 -> 1.

    With a single alive center (t = 1) the only feasible weight is 1 and
    the map is the identity.
    """
    arr = np.asarray(w, dtype=np.float64)
    if np.any(arr < 0.0) or np.any(arr > 1.0):
        raise ValueError("weights must lie in [0, 1]")
    if t == 1:
        out = arr.copy()
    else:
        knee = 1.0 / t
        out = np.where(
            arr <= knee,
            (t / E) * arr,
            (t * arr - 1.0) / (t - 1.0) * (1.0 - 1.0 / E) + 1.0 / E,
        )
    return float(out) if np.ndim(w) == 0 else out


def neg_xlogx(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    safe = np.where(x > 0.0, x, 1.0)
    return np.where(x > 0.0, -x * np.log(safe), 0.0)


def entropy_weight_loss(model, side: str, entities) -> float:
    entities = _as_batch(entities)
    total = 0.0
    for j in range(model.config.v):
        w = model.weights(side, entities, j)
        total += float(neg_xlogx(map_weight(w, w.shape[1])).sum())
    return total / len(entities)


def uniform_offset_entropy(model, side: str, entities) -> float:
    """Mean over entities of sum_j sum_i -w log(w / alive_j) on raw softmax weights."""
    entities = _as_batch(entities)
    total = 0.0
    for j in range(model.config.v):
        w = model.weights(side, entities, j)
        t = w.shape[1]
        safe = np.where(w > 0.0, w, 1.0)
        total += float(np.where(w > 0.0, -w * np.log(safe / t), 0.0).sum())
    return total / len(entities)


def rating_loss(model, batch) -> float:
    if len(batch) == 0:
        raise ValueError("empty rating batch")
    err = model.predict_many(batch.users, batch.items) - batch.ratings
    return float(np.mean(err * err))


def weight_decay(model, users, items) -> float:
    """Per-side mean squared latent norm (plus squared biases) of the given entities."""
    total = 0.0
    for side, ents in (("user", _as_batch(users)), ("item", _as_batch(items))):
        lat = model.compose(side, ents)
        sq = np.einsum("kd,kd->k", lat, lat)
        if model.config.use_biases:
            b = model.biases.user if side == "user" else model.biases.item
            sq = sq + b[ents] ** 2
        total += float(sq.mean())
    return total


@dataclass(frozen=True)
class LossBreakdown:
    spread_user: float
    spread_item: float
    proximity_user: float
    proximity_item: float
    loss1: float
    loss2_user: float
    loss2_item: float
    loss2: float
    loss3: float
    weight_decay: float
    total: float
    eta: float
    gamma: float
    lam: float

    @classmethod
    def assemble(cls, spread, proximity, loss2_sides, loss3, wd, eta, gamma, lam):
        loss1 = spread["user"] + spread["item"] + proximity["user"] + proximity["item"]
        loss2 = loss2_sides["user"] + loss2_sides["item"]
        total = eta * loss1 + gamma * loss2 + loss3 + lam * wd
        return cls(spread["user"], spread["item"], proximity["user"], proximity["item"], loss1,
                   loss2_sides["user"], loss2_sides["item"], loss2, loss3, wd, total,
                   eta, gamma, lam)


def weight_loss_fn(kind: str):
    if kind == "mapped-entropy":
        return entropy_weight_loss
    if kind == "uniform-offset":
        return uniform_offset_entropy
    raise ValueError(f"unknown weight loss {kind!r}; expected one of {WEIGHT_LOSSES}")


def total_loss(model, batch, eta: float, gamma: float, lam: float, rho: float,
               weight_loss: str = "mapped-entropy") -> LossBreakdown:
    """Full objective on a rating batch.

    Entity terms use the distinct users and items occurring in ``batch``.
    With shared centers both spread terms evaluate the same bank.
    """
    if min(eta, gamma, lam) < 0:
        raise ValueError("loss coefficients must be nonnegative")
    ents = {"user": np.unique(batch.users), "item": np.unique(batch.items)}
    wl = weight_loss_fn(weight_loss)
    spread = {s: spread_loss(model.banks[s], rho) for s in SIDES}
    prox = {s: proximity_loss(model, s, ents[s]) for s in SIDES}
    l2 = {s: wl(model, s, ents[s]) for s in SIDES}
    l3 = rating_loss(model, batch)
    wd = weight_decay(model, ents["user"], ents["item"])
    return LossBreakdown.assemble(spread, prox, l2, l3, wd, eta, gamma, lam)
