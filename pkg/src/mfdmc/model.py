"""MFDMC parameters: per-view cluster centers, weight logits and bias heads.

A latent vector is built view by view: the view-j sub-vector of entity k is
the softmax(logits[k, j])-weighted sum of that view's alive centers, and the
d-vector is the concatenation of the v sub-vectors.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, replace

import numpy as np

SIDES = ("user", "item")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    d: int = 16
    v: int = 8
    t_init: int = 10
    share_centers: bool = True
    use_biases: bool = True
    range_min: float = 1.0
    range_max: float = 5.0

    def __post_init__(self):
        if self.v < 1:
            raise ConfigError("v must be >= 1")
        if self.d < 1 or self.d % self.v:
            raise ConfigError(f"d={self.d} is not divisible by v={self.v}")
        if self.t_init < 3:
            raise ConfigError("t_init must be >= 3")

    @property
    def b(self) -> int:
        return self.d // self.v


def softmax(z: np.ndarray, axis: int = -1) -> np.ndarray:
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


class CenterBank:
    """Ragged per-view center matrices plus the original IDs of alive centers."""

    def __init__(self, views: list[np.ndarray], alive: list[np.ndarray] | None = None):
        self.views = [np.array(c, dtype=np.float64) for c in views]
        if alive is None:
            alive = [np.arange(len(c)) for c in self.views]
        self.alive = [np.asarray(a, dtype=np.int64) for a in alive]
        bs = {c.shape[1] for c in self.views}
        if len(bs) != 1:
            raise ConfigError("all views must share one center dimension")

    @property
    def v(self) -> int:
        return len(self.views)

    @property
    def b(self) -> int:
        return self.views[0].shape[1]

    def counts(self) -> list[int]:
        return [len(c) for c in self.views]

    def keep(self, view: int, positions: np.ndarray) -> None:
        self.views[view] = self.views[view][positions]
        self.alive[view] = self.alive[view][positions]


@dataclass
class Biases:
    mu: float
    user: np.ndarray
    item: np.ndarray


class MfdmcModel:
    def __init__(self, config: ModelConfig, user_centers: CenterBank, item_centers: CenterBank,
                 user_logits: list[np.ndarray], item_logits: list[np.ndarray],
                 biases: Biases | None = None):
        self.config = config
        self.banks = {"user": user_centers, "item": item_centers}
        self.logits = {
            "user": [np.array(z, dtype=np.float64) for z in user_logits],
            "item": [np.array(z, dtype=np.float64) for z in item_logits],
        }
        self.biases = biases
        for side in SIDES:
            bank = self.banks[side]
            if bank.v != config.v or bank.b != config.b:
                raise ConfigError(f"{side} bank shape does not match config")
            for j, z in enumerate(self.logits[side]):
                if z.shape[1] != len(bank.views[j]):
                    raise ConfigError(f"{side} logits view {j} width != alive centers")

    @property
    def shared(self) -> bool:
        return self.banks["user"] is self.banks["item"]

    @property
    def m(self) -> int:
        return self.logits["user"][0].shape[0]

    @property
    def n(self) -> int:
        return self.logits["item"][0].shape[0]

    @property
    def range_min(self) -> float:
        return self.config.range_min

    @property
    def range_max(self) -> float:
        return self.config.range_max

    def n_entities(self, side: str) -> int:
        return self.m if side == "user" else self.n

    def view_slice(self, view: int) -> slice:
        b = self.config.b
        return slice(view * b, (view + 1) * b)

    def view_weights(self, side: str, entity: int, view: int) -> np.ndarray:
        return softmax(self.logits[side][view][entity])

    def weights(self, side: str, entities, view: int) -> np.ndarray:
        """Softmax weights of many entities over one view, shape (K, alive)."""
        return softmax(self.logits[side][view][entities], axis=1)

    def compose_latent(self, side: str, entity: int) -> np.ndarray:
        return self.compose(side, np.array([entity]))[0]

    def compose(self, side: str, entities=None) -> np.ndarray:
        """Latent vectors of ``entities`` (all when None), shape (K, d)."""
        if entities is None:
            entities = np.arange(self.n_entities(side))
        bank = self.banks[side]
        parts = [self.weights(side, entities, j) @ bank.views[j] for j in range(self.config.v)]
        return np.concatenate(parts, axis=1)

    def predict(self, user: int, item: int) -> float:
        return float(self.predict_many(np.array([user]), np.array([item]))[0])

    def predict_many(self, users, items) -> np.ndarray:
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        uu, ui = np.unique(users, return_inverse=True)
        iu, ii = np.unique(items, return_inverse=True)
        P = self.compose("user", uu)[ui]
        Q = self.compose("item", iu)[ii]
        out = np.einsum("kd,kd->k", P, Q)
        if self.config.use_biases:
            out = out + self.biases.mu + self.biases.user[users] + self.biases.item[items]
        return out

    def parameters(self) -> dict[str, np.ndarray]:
        """Trainable arrays by name; the returned arrays are the live storage."""
        params = {}
        if self.shared:
            for j, c in enumerate(self.banks["user"].views):
                params[f"centers.shared.{j}"] = c
        else:
            for side in SIDES:
                for j, c in enumerate(self.banks[side].views):
                    params[f"centers.{side}.{j}"] = c
        for side in SIDES:
            for j, z in enumerate(self.logits[side]):
                params[f"logits.{side}.{j}"] = z
        if self.config.use_biases:
            params["bias.user"] = self.biases.user
            params["bias.item"] = self.biases.item
        return params

    def center_key(self, side: str, view: int) -> str:
        return f"centers.{'shared' if self.shared else side}.{view}"

    def clone(self) -> "MfdmcModel":
        return copy.deepcopy(self)


def init_model(config: ModelConfig, meta, seed: int) -> MfdmcModel:
    """Centers ~ U[0, 1), logits ~ N(0, 0.01^2), biases zero, mu = meta.global_mean."""
    config = replace(config, range_min=float(meta.range_min), range_max=float(meta.range_max))
    rng = np.random.default_rng(seed)
    t, b, v = config.t_init, config.b, config.v

    def bank():
        return CenterBank([rng.random((t, b)) for _ in range(v)])

    user_bank = bank()
    item_bank = user_bank if config.share_centers else bank()
    user_logits = [rng.normal(0.0, 0.01, size=(meta.m, t)) for _ in range(v)]
    item_logits = [rng.normal(0.0, 0.01, size=(meta.n, t)) for _ in range(v)]
    biases = None
    if config.use_biases:
        biases = Biases(float(meta.global_mean), np.zeros(meta.m), np.zeros(meta.n))
    return MfdmcModel(config, user_bank, item_bank, user_logits, item_logits, biases)
