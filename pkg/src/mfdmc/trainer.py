"""Hand-derived gradients, minibatch optimization and dynamic center pruning."""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .data import DatasetSplit, Ratings
from .evaluation import evaluate
from .losses import WEIGHT_LOSSES, LossBreakdown, neg_xlogx
from .model import SIDES, MfdmcModel, softmax
from .optim import make_optimizer

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 1024
    learning_rate: float = 0.01
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    eta_max: float = 0.1
    gamma_max: float = 0.01
    ramp_epochs: int | None = None  # None -> I_p
    I_p: int = 40
    psi_mode: str = "one-over-t"
    psi: float | None = None
    min_centers: int = 3
    prune_every: int = 1
    lam: float = 0.01
    rho: float = 1.0
    seed: int = 0
    early_stop_patience: int | None = 10
    weight_loss: str = "mapped-entropy"
    clamp: bool = True

    def __post_init__(self):
        if self.min_centers < 1:
            raise ValueError("min_centers must be >= 1")
        if self.I_p < 0:
            raise ValueError("I_p must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.prune_every < 1:
            raise ValueError("prune_every must be >= 1")
        if self.psi_mode not in ("one-over-t", "fixed"):
            raise ValueError(f"unknown psi_mode {self.psi_mode!r}")
        if self.psi_mode == "fixed" and self.psi is None:
            raise ValueError("psi_mode 'fixed' requires psi")
        if self.weight_loss not in WEIGHT_LOSSES:
            raise ValueError(f"unknown weight_loss {self.weight_loss!r}")

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def to_dict(self) -> dict:
        return asdict(self)


def ramp_coefficients(config: TrainConfig, epoch: int) -> tuple[float, float]:
    """Linear warmup of the cluster-center and weight-loss coefficients."""
    ramp = config.I_p if config.ramp_epochs is None else config.ramp_epochs
    frac = 1.0 if ramp <= 0 else min(1.0, epoch / ramp)
    return config.eta_max * frac, config.gamma_max * frac


# ---------------------------------------------------------------------------
# backward pass


def spread_with_grad(centers: np.ndarray, rho: float) -> tuple[float, np.ndarray]:
    """Spread loss of one view and its gradient w.r.t. the raw centers.

    The gradient flows through the view-wide min and max of the
    normalization; a constant view has no defined gradient and gets zero.
    """
    n = len(centers)
    grad = np.zeros_like(centers)
    if n < 2:
        return 0.0, grad
    lo, hi = centers.min(), centers.max()
    a, bb = np.triu_indices(n, k=1)
    if hi == lo:
        return float(rho * len(a)), grad
    span = hi - lo
    cn = (centers - lo) / span
    diff = cn[a] - cn[bb]
    gap = rho - np.einsum("pk,pk->p", diff, diff)
    active = gap > 0
    value = float(gap[active].sum())
    g_cn = np.zeros_like(cn)
    coef = -2.0 * diff[active]
    np.add.at(g_cn, a[active], coef)
    np.add.at(g_cn, bb[active], -coef)
    grad = g_cn / span
    grad.flat[np.argmin(centers)] += float((g_cn * (cn - 1.0)).sum()) / span
    grad.flat[np.argmax(centers)] -= float((g_cn * cn).sum()) / span
    return value, grad


def _weight_loss_grad(w: np.ndarray, kind: str) -> tuple[float, np.ndarray]:
    """Summed weight regularizer over rows of ``w`` and d/dw."""
    t = w.shape[1]
    if kind == "uniform-offset":
        safe = np.where(w > 0, w, 1.0)
        logr = np.log(safe / t)
        value = float(np.where(w > 0, -w * logr, 0.0).sum())
        return value, np.where(w > 0, -(logr + 1.0), 0.0)
    if t == 1:
        return 0.0, np.full_like(w, -1.0)
    knee = 1.0 / t
    lower = w <= knee
    mapped = np.where(lower, (t / math.e) * w,
                      (t * w - 1.0) / (t - 1.0) * (1.0 - 1.0 / math.e) + 1.0 / math.e)
    slope = np.where(lower, t / math.e, t * (1.0 - 1.0 / math.e) / (t - 1.0))
    safe = np.where(mapped > 0, mapped, 1.0)
    dh = np.where(mapped > 0, -(np.log(safe) + 1.0), 0.0)
    return float(neg_xlogx(mapped).sum()), dh * slope


def compute_gradients(model: MfdmcModel, batch: Ratings, eta: float, gamma: float,
                      lam: float, rho: float, weight_loss: str = "mapped-entropy"):
    """Analytic gradient of the total objective on ``batch``.

    Returns ``(grads, breakdown)`` where ``grads`` maps every name of
    ``model.parameters()`` to a dense array of the same shape. The argmax
    assignment inside the proximity term is held constant.
    """
    if len(batch) == 0:
        raise ValueError("empty rating batch")
    cfg = model.config
    B = len(batch)
    params = model.parameters()
    grads = {k: np.zeros_like(p) for k, p in params.items()}

    ents, inv, W, lat = {}, {}, {}, {}
    for side, idx in (("user", batch.users), ("item", batch.items)):
        ents[side], inv[side] = np.unique(idx, return_inverse=True)
        bank = model.banks[side]
        W[side] = [softmax(model.logits[side][j][ents[side]], axis=1) for j in range(cfg.v)]
        lat[side] = np.concatenate([W[side][j] @ bank.views[j] for j in range(cfg.v)], axis=1)

    Pu = lat["user"][inv["user"]]
    Qi = lat["item"][inv["item"]]
    pred = np.einsum("kd,kd->k", Pu, Qi)
    if cfg.use_biases:
        bu = model.biases.user[batch.users]
        bi = model.biases.item[batch.items]
        pred = pred + model.biases.mu + bu + bi
    err = pred - batch.ratings
    loss3 = float(np.mean(err * err))
    dpred = 2.0 * err / B

    g_lat = {}
    g_lat["user"] = np.zeros_like(lat["user"])
    np.add.at(g_lat["user"], inv["user"], dpred[:, None] * Qi)
    g_lat["item"] = np.zeros_like(lat["item"])
    np.add.at(g_lat["item"], inv["item"], dpred[:, None] * Pu)

    wd = 0.0
    for side in SIDES:
        K = len(ents[side])
        L = lat[side]
        sq = np.einsum("kd,kd->k", L, L)
        g_lat[side] += lam * 2.0 * L / K
        if cfg.use_biases:
            bias = model.biases.user if side == "user" else model.biases.item
            be = bias[ents[side]]
            sq = sq + be * be
            g_b = np.bincount(inv[side], weights=dpred, minlength=K) + lam * 2.0 * be / K
            grads[f"bias.{side}"][ents[side]] = g_b
        wd += float(sq.mean())

    prox = {s: 0.0 for s in SIDES}
    l2 = {s: 0.0 for s in SIDES}
    for side in SIDES:
        K = len(ents[side])
        bank = model.banks[side]
        for j in range(cfg.v):
            Wj, Cj = W[side][j], bank.views[j]
            sl = model.view_slice(j)
            sub = lat[side][:, sl]
            g_sub = g_lat[side][:, sl].copy()
            g_c = np.zeros_like(Cj)

            assigned = np.argmax(Wj, axis=1)
            diff = sub - Cj[assigned]
            prox[side] += float(np.einsum("kb,kb->", diff, diff)) / K
            g_sub += eta * 2.0 * diff / K
            np.add.at(g_c, assigned, -eta * 2.0 * diff / K)

            g_c += Wj.T @ g_sub
            g_w = g_sub @ Cj.T
            h, dh = _weight_loss_grad(Wj, weight_loss)
            l2[side] += h / K
            g_w += gamma * dh / K

            g_z = Wj * (g_w - np.einsum("kt,kt->k", Wj, g_w)[:, None])
            grads[f"logits.{side}.{j}"][ents[side]] = g_z
            grads[model.center_key(side, j)] += g_c

    spread = {s: 0.0 for s in SIDES}
    for side in SIDES:
        for j, Cj in enumerate(model.banks[side].views):
            val, g = spread_with_grad(Cj, rho)
            spread[side] += val
            grads[model.center_key(side, j)] += eta * g

    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingError(f"non-finite gradient in parameter block {k!r}")
    breakdown = LossBreakdown.assemble(spread, prox, l2, loss3, wd, eta, gamma, lam)
    return grads, breakdown


def apply_update(model, gradients: dict[str, np.ndarray], optimizer) -> None:
    optimizer.step(model.parameters(), gradients)


# ---------------------------------------------------------------------------
# pruning


@dataclass
class PruneEvent:
    side: str  # "user", "item" or "shared"
    view: int
    removed: list[int]  # original center IDs
    mean_weights: list[float]  # W-bar of the removed centers
    psi: float
    alive_after: int


def mean_center_weights(model: MfdmcModel, side: str, view: int) -> np.ndarray:
    ents = np.arange(model.n_entities(side))
    return model.weights(side, ents, view).mean(axis=0)


def prune_centers(model: MfdmcModel, config: TrainConfig, epoch: int,
                  optimizer=None) -> list[PruneEvent]:
    """Remove centers whose population-mean weight is below psi.

    Acts only after ``epoch > I_p`` and every ``prune_every`` epochs. A shared
    bank is judged on the pooled mean over all users and items. Deleted
    centers take their logit columns with them so softmax renormalizes over
    the survivors.
    """
    if epoch <= config.I_p or (epoch - config.I_p) % config.prune_every:
        return []
    if model.shared:
        groups = [("shared", ("user", "item"))]
    else:
        groups = [("user", ("user",)), ("item", ("item",))]
    events = []
    for label, sides in groups:
        bank = model.banks[sides[0]]
        for j in range(bank.v):
            alive = len(bank.views[j])
            if alive <= config.min_centers:
                continue
            total = sum(model.n_entities(s) for s in sides)
            wbar = sum(mean_center_weights(model, s, j) * model.n_entities(s) for s in sides) / total
            psi = 1.0 / alive if config.psi_mode == "one-over-t" else float(config.psi)
            keep = wbar >= psi
            if keep.sum() < config.min_centers:
                order = np.argsort(-wbar, kind="stable")
                keep = np.zeros(alive, dtype=bool)
                keep[order[:config.min_centers]] = True
            if keep.all():
                continue
            positions = np.flatnonzero(keep)
            removed = bank.alive[j][~keep].tolist()
            events.append(PruneEvent(label, j, removed, wbar[~keep].tolist(), psi, len(positions)))
            bank.keep(j, positions)
            if optimizer is not None:
                optimizer.select(model.center_key(sides[0], j), positions, axis=0)
            for s in sides:
                model.logits[s][j] = model.logits[s][j][:, positions]
                if optimizer is not None:
                    optimizer.select(f"logits.{s}.{j}", positions, axis=1)
    return events


# ---------------------------------------------------------------------------
# training loop


@dataclass
class EpochRecord:
    epoch: int
    loss1: float
    loss2: float
    loss3: float
    total: float
    eta: float
    gamma: float
    alive: dict[str, list[int]]
    val_rmse: float


@dataclass
class TrainReport:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    best_val_rmse: float = math.inf
    stopped_early: bool = False
    prune_events: list[PruneEvent] = field(default_factory=list)
    model: object = None  # parameters at the best validation epoch

    def val_trace(self) -> list[float]:
        return [r.val_rmse for r in self.records]


def alive_counts(model) -> dict[str, list[int]]:
    if not isinstance(model, MfdmcModel):
        return {}
    return {s: model.banks[s].counts() for s in SIDES}


def write_epoch_log(report: TrainReport, path) -> None:
    recs = report.records
    alive_cols = []
    if recs and recs[0].alive:
        for s in SIDES:
            alive_cols += [f"alive_{s}_{j}" for j in range(len(recs[0].alive[s]))]
    header = ["epoch", "loss1", "loss2", "loss3", "total", "eta", "gamma", *alive_cols, "val_rmse"]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(header) + "\n")
        for r in recs:
            alive = [str(c) for s in SIDES for c in r.alive.get(s, [])]
            row = [str(r.epoch), *(repr(x) for x in (r.loss1, r.loss2, r.loss3, r.total,
                                                    r.eta, r.gamma)), *alive, repr(r.val_rmse)]
            fh.write("\t".join(row) + "\n")


def run_epochs(model, split: DatasetSplit, config: TrainConfig, step_fn, epoch_end=None,
               on_best=None) -> TrainReport:
    """Shared epoch loop: seeded shuffles, minibatch steps, validation, early stopping.

    ``step_fn(batch, epoch_index)`` performs one update and returns a
    LossBreakdown; ``epoch_end(epoch)`` runs after the last batch of an epoch.
    """
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    train = split.train
    N = len(train)
    report = TrainReport()
    since_best = 0
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(N)
        sums = np.zeros(4)
        n_batches = 0
        coeffs = (0.0, 0.0)
        for start in range(0, N, config.batch_size):
            batch = train[order[start:start + config.batch_size]]
            br = step_fn(batch, epoch - 1)
            sums += (br.loss1, br.loss2, br.loss3, br.total)
            coeffs = (br.eta, br.gamma)
            n_batches += 1
        if epoch_end is not None:
            report.prune_events.extend(epoch_end(epoch) or [])
        val = evaluate(model, split.validation, clamp=config.clamp, split="validation").rmse
        if not math.isfinite(val):
            raise TrainingError(f"validation RMSE diverged at epoch {epoch}")
        means = sums / max(n_batches, 1)
        report.records.append(EpochRecord(epoch, *means.tolist(), *coeffs,
                                          alive_counts(model), val))
        log.info("epoch %d loss3=%.4f val_rmse=%.4f", epoch, means[2], val)
        if val < report.best_val_rmse:
            report.best_val_rmse = val
            report.best_epoch = epoch
            report.model = model.clone()
            since_best = 0
            if on_best is not None:
                on_best(report.model, epoch, val)
        else:
            since_best += 1
            patience = config.early_stop_patience
            if patience is not None and patience > 0 and since_best >= patience:
                report.stopped_early = True
                break
    return report


def fit(model: MfdmcModel, split: DatasetSplit, config: TrainConfig,
        checkpoint_path=None, fingerprint: str | None = None) -> TrainReport:
    """Train ``model`` in place; ``report.model`` holds the best-validation copy."""
    opt = make_optimizer(config.optimizer, config.learning_rate, config.beta1,
                         config.beta2, config.epsilon)

    def step(batch, epoch_index):
        eta, gamma = ramp_coefficients(config, epoch_index)
        grads, br = compute_gradients(model, batch, eta, gamma, config.lam, config.rho,
                                      config.weight_loss)
        apply_update(model, grads, opt)
        return br

    def epoch_end(epoch):
        return prune_centers(model, config, epoch, opt)

    on_best = None
    if checkpoint_path is not None:
        from .checkpoint import save_checkpoint

        def on_best(best, epoch, val):
            save_checkpoint(best, checkpoint_path, fingerprint=fingerprint,
                            train_config=config.to_dict(), epoch=epoch, best_val_rmse=val)

    return run_epochs(model, split, config, step, epoch_end, on_best)


# ---------------------------------------------------------------------------
# finite-difference oracle


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor); the floor keeps near-zero partials meaningful."""
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / scale


def numeric_gradient(objective, array: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central differences of ``objective()`` w.r.t. every entry of ``array`` (in place)."""
    grad = np.zeros_like(array)
    for i in range(array.size):
        old = array.flat[i]
        array.flat[i] = old + step
        up = objective()
        array.flat[i] = old - step
        down = objective()
        array.flat[i] = old
        grad.flat[i] = (up - down) / (2.0 * step)
    return grad


def gradient_check(model, batch, gradient_fn, objective, step: float = 1e-5) -> dict[str, float]:
    """Max relative error per parameter block between ``gradient_fn`` and central differences."""
    grads = gradient_fn(model, batch)
    out = {}
    for name, arr in model.parameters().items():
        num = numeric_gradient(lambda: objective(model, batch), arr, step)
        out[name] = float(relative_error(grads[name], num).max()) if arr.size else 0.0
    return out
