"""RMSE evaluation and interpretability exports."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import ItemMetadata, Ratings
from .model import SIDES


def rmse(predictions, truths) -> float:
    p = np.asarray(predictions, dtype=np.float64)
    t = np.asarray(truths, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"length mismatch: {p.shape} vs {t.shape}")
    if p.size == 0:
        raise ValueError("cannot compute RMSE of an empty set")
    err = p - t
    return float(np.sqrt(np.mean(err * err)))


@dataclass
class EvalReport:
    split: str
    count: int
    rmse: float
    clamp: bool
    # rounded true rating -> (count, rmse)
    buckets: dict[float, tuple[int, float]] = field(default_factory=dict)


def predict_clamped(model, triples: Ratings, clamp: bool = True) -> np.ndarray:
    pred = model.predict_many(triples.users, triples.items)
    if clamp:
        pred = np.clip(pred, model.range_min, model.range_max)
    return pred


def evaluate(model, triples: Ratings, clamp: bool = True, split: str = "test") -> EvalReport:
    if len(triples) == 0:
        raise ValueError("no triples to evaluate")
    pred = predict_clamped(model, triples, clamp)
    buckets = {}
    keys = np.round(triples.ratings)
    for k in np.unique(keys):
        sel = keys == k
        buckets[float(k)] = (int(sel.sum()), rmse(pred[sel], triples.ratings[sel]))
    return EvalReport(split, len(triples), rmse(pred, triples.ratings), clamp, buckets)


def assignments(model, side: str) -> list[np.ndarray]:
    """Argmax cluster position per entity for every view."""
    ents = np.arange(model.n_entities(side))
    return [np.argmax(model.weights(side, ents, j), axis=1) for j in range(model.config.v)]


def _fmt(x: float) -> str:
    return repr(float(x))


def export_assignments(model, side: str, path) -> None:
    """One row per (entity, view): assigned center ID and the full weight vector.

    Center IDs are the original (pre-pruning) identities; weights are listed
    in the same order as the ``alive`` column.
    """
    bank = model.banks[side]
    ents = np.arange(model.n_entities(side))
    weights = [model.weights(side, ents, j) for j in range(model.config.v)]
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("entity_index\tview\tassigned_cluster\talive\tweights\n")
        for k in ents.tolist():
            for j in range(model.config.v):
                w = weights[j][k]
                pos = int(np.argmax(w))
                alive = ",".join(str(a) for a in bank.alive[j].tolist())
                fh.write(f"{k}\t{j}\t{int(bank.alive[j][pos])}\t{alive}\t"
                         + ",".join(_fmt(x) for x in w) + "\n")


def export_embeddings(model, side: str, path) -> None:
    lat = model.compose(side)
    b = model.config.b
    bounds = " ".join(f"{j}:{j * b}-{(j + 1) * b}" for j in range(model.config.v))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# side={side} d={model.config.d} views={bounds}\n")
        fh.write("entity_index\t" + "\t".join(f"x{i}" for i in range(lat.shape[1])) + "\n")
        for k, row in enumerate(lat):
            fh.write(f"{k}\t" + "\t".join(_fmt(x) for x in row) + "\n")


@dataclass
class ClusterStats:
    side: str
    view: int
    cluster: int  # original center ID
    members: int
    mean_weight: float
    mean_rating: float  # nan when members have no train ratings
    n_ratings: int
    # category -> (count, mean rating); empty without metadata
    categories: dict[str, tuple[int, float]] = field(default_factory=dict)


@dataclass
class ClusterReport:
    side: str
    clusters: list[ClusterStats]

    def members_by_view(self) -> dict[int, int]:
        out: dict[int, int] = {}
        for c in self.clusters:
            out[c.view] = out.get(c.view, 0) + c.members
        return out


def cluster_report(model, split, metadata: ItemMetadata | None = None,
                   side: str = "user") -> ClusterReport:
    """Membership, mean weight and train-rating statistics per cluster.

    Category statistics count the train ratings that involve a cluster's
    members, grouped by the rated item's categories.
    """
    if side not in SIDES:
        raise ValueError(f"side must be one of {SIDES}")
    train = split.train if hasattr(split, "train") else split
    ents = np.arange(model.n_entities(side))
    owner = train.users if side == "user" else train.items
    bank = model.banks[side]
    item_cats = metadata.categories if metadata is not None else None
    clusters = []
    for j, assign in enumerate(assignments(model, side)):
        wbar = model.weights(side, ents, j).mean(axis=0)
        row_cluster = assign[owner]
        for pos, cid in enumerate(bank.alive[j].tolist()):
            sel = row_cluster == pos
            r = train.ratings[sel]
            cats = {}
            if item_cats is not None:
                acc: dict[str, list[float]] = {}
                for it, rv in zip(train.items[sel].tolist(), r.tolist()):
                    for c in item_cats.get(it, ()):
                        acc.setdefault(c, []).append(rv)
                cats = {c: (len(v), float(np.mean(v))) for c, v in sorted(acc.items())}
            clusters.append(ClusterStats(
                side, j, int(cid), int((assign == pos).sum()), float(wbar[pos]),
                float(r.mean()) if len(r) else float("nan"), int(len(r)), cats,
            ))
    return ClusterReport(side, clusters)


def write_cluster_report(report: ClusterReport, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("side\tview\tcluster\tmembers\tmean_weight\tmean_rating\tn_ratings\tcategories\n")
        for c in report.clusters:
            cats = ";".join(f"{k}={n}:{mr:.4f}" for k, (n, mr) in c.categories.items())
            fh.write(f"{c.side}\t{c.view}\t{c.cluster}\t{c.members}\t{c.mean_weight:.6f}\t"
                     f"{c.mean_rating:.6f}\t{c.n_ratings}\t{cats}\n")
