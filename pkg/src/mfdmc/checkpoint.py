"""Versioned binary checkpoints for MFDMC and baseline models.

Layout (all integers little-endian)::

    5 bytes   magic b"MFDMC"
    uint32    format version
    uint64    metadata length L
    L bytes   UTF-8 JSON metadata
    payload   float64 LE arrays, row-major, in metadata["arrays"] order

Metadata keys: ``kind`` ("mfdmc", "funk" or "biased"), ``model_config``,
``fingerprint`` (dataset hash or null), ``alive`` (original center IDs per
bank and view), ``arrays`` (list of ``[name, shape]``), ``scalars``
(``mu``, ``range_min``, ``range_max``), ``train_config``, ``epoch`` and
``best_val_rmse``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .baselines import BaselineModel
from .model import Biases, CenterBank, MfdmcModel, ModelConfig

MAGIC = b"MFDMC"
FORMAT_VERSION = 1
_HEAD = struct.Struct("<5sIQ")


class CheckpointError(Exception):
    pass


class NotACheckpointError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    pass


class FingerprintMismatchError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    model: object
    kind: str
    fingerprint: str | None
    train_config: dict | None
    epoch: int
    best_val_rmse: float | None


def _mfdmc_arrays(model: MfdmcModel):
    arrays = []
    for name, arr in model.parameters().items():
        arrays.append((name, arr))
    alive = {}
    for label in (("shared",) if model.shared else ("user", "item")):
        side = "user" if label == "shared" else label
        alive[label] = [a.tolist() for a in model.banks[side].alive]
    return arrays, alive


def save_checkpoint(model, path, fingerprint: str | None = None, train_config: dict | None = None,
                    epoch: int = 0, best_val_rmse: float | None = None) -> None:
    if isinstance(model, MfdmcModel):
        kind = "mfdmc"
        arrays, alive = _mfdmc_arrays(model)
        cfg = asdict(model.config)
        scalars = {"mu": model.biases.mu if model.biases is not None else 0.0}
    elif isinstance(model, BaselineModel):
        kind = model.kind
        arrays = list(model.parameters().items())
        alive = {}
        cfg = {"d": model.d}
        scalars = {"mu": model.mu, "range_min": model.range_min, "range_max": model.range_max}
    else:
        raise TypeError(f"cannot checkpoint {type(model).__name__}")
    meta = {
        "kind": kind,
        "model_config": cfg,
        "fingerprint": fingerprint,
        "alive": alive,
        "arrays": [[name, list(arr.shape)] for name, arr in arrays],
        "scalars": scalars,
        "train_config": train_config,
        "epoch": epoch,
        "best_val_rmse": best_val_rmse,
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_HEAD.pack(MAGIC, FORMAT_VERSION, len(blob)))
        fh.write(blob)
        for _, arr in arrays:
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    tmp.replace(path)


def read_checkpoint(path, expected_fingerprint: str | None = None) -> Checkpoint:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    if len(raw) < len(MAGIC) or raw[:len(MAGIC)] != MAGIC:
        raise NotACheckpointError(f"{path}: not a checkpoint (bad magic bytes)")
    if len(raw) < _HEAD.size:
        raise TruncatedCheckpointError(f"{path}: truncated header")
    _, version, meta_len = _HEAD.unpack_from(raw)
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(
            f"{path}: format version {version}, this build reads {FORMAT_VERSION}")
    off = _HEAD.size
    if len(raw) < off + meta_len:
        raise TruncatedCheckpointError(f"{path}: truncated metadata block")
    try:
        meta = json.loads(raw[off:off + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt metadata: {exc}") from None
    off += meta_len
    arrays = {}
    for name, shape in meta["arrays"]:
        count = int(np.prod(shape)) if shape else 1
        nbytes = 8 * count
        if len(raw) < off + nbytes:
            raise TruncatedCheckpointError(f"{path}: truncated payload at array {name!r}")
        arrays[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=off).reshape(shape).copy()
        off += nbytes
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes after payload")
    fp = meta.get("fingerprint")
    if expected_fingerprint is not None and fp != expected_fingerprint:
        raise FingerprintMismatchError(
            f"{path}: checkpoint was trained on dataset {fp}, got {expected_fingerprint}")
    model = _build(meta, arrays)
    return Checkpoint(model, meta["kind"], fp, meta.get("train_config"),
                      int(meta.get("epoch", 0)), meta.get("best_val_rmse"))


def load_checkpoint(path, expected_fingerprint: str | None = None):
    return read_checkpoint(path, expected_fingerprint).model


def _build(meta: dict, arrays: dict[str, np.ndarray]):
    kind = meta["kind"]
    scalars = meta["scalars"]
    if kind in ("funk", "biased"):
        return BaselineModel(kind, arrays["P"], arrays["Q"], scalars["mu"], arrays.get("bias.user"),
                             arrays.get("bias.item"), scalars["range_min"], scalars["range_max"])
    if kind != "mfdmc":
        raise CheckpointError(f"unknown model kind {kind!r}")
    cfg = ModelConfig(**meta["model_config"])
    alive = meta["alive"]

    def bank(label):
        return CenterBank([arrays[f"centers.{label}.{j}"] for j in range(cfg.v)], alive[label])

    if "shared" in alive:
        user_bank = item_bank = bank("shared")
    else:
        user_bank, item_bank = bank("user"), bank("item")
    logits = {s: [arrays[f"logits.{s}.{j}"] for j in range(cfg.v)] for s in ("user", "item")}
    biases = None
    if cfg.use_biases:
        biases = Biases(float(scalars["mu"]), arrays["bias.user"], arrays["bias.item"])
    return MfdmcModel(cfg, user_bank, item_bank, logits["user"], logits["item"], biases)
