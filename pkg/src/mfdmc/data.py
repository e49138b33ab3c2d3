"""Rating dataset loading, dense ID remapping and reproducible splits."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterator, NamedTuple

import numpy as np


class DataError(Exception):
    """Raised for unreadable, malformed or out-of-range rating data."""


class ParseError(DataError):
    pass


class RangeError(DataError):
    pass


class RatingTriple(NamedTuple):
    user_index: int
    item_index: int
    rating: float


@dataclass(frozen=True)
class Ratings:
    """Column-oriented store of (user, item, rating) triples."""

    users: np.ndarray
    items: np.ndarray
    ratings: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "users", np.asarray(self.users, dtype=np.int64))
        object.__setattr__(self, "items", np.asarray(self.items, dtype=np.int64))
        object.__setattr__(self, "ratings", np.asarray(self.ratings, dtype=np.float64))
        if not (len(self.users) == len(self.items) == len(self.ratings)):
            raise ValueError("users, items and ratings must have equal length")

    @classmethod
    def from_triples(cls, triples) -> "Ratings":
        triples = list(triples)
        if not triples:
            return cls(np.empty(0), np.empty(0), np.empty(0))
        u, i, r = zip(*triples)
        return cls(np.array(u), np.array(i), np.array(r))

    def __len__(self) -> int:
        return len(self.ratings)

    def __iter__(self) -> Iterator[RatingTriple]:
        for u, i, r in zip(self.users.tolist(), self.items.tolist(), self.ratings.tolist()):
            yield RatingTriple(u, i, r)

    def __getitem__(self, idx):
        if isinstance(idx, (int, np.integer)):
            return RatingTriple(int(self.users[idx]), int(self.items[idx]), float(self.ratings[idx]))
        return Ratings(self.users[idx], self.items[idx], self.ratings[idx])

    def concat(self, *others: "Ratings") -> "Ratings":
        parts = (self, *others)
        return Ratings(
            np.concatenate([p.users for p in parts]),
            np.concatenate([p.items for p in parts]),
            np.concatenate([p.ratings for p in parts]),
        )


@dataclass(frozen=True)
class DatasetMeta:
    m: int
    n: int
    N: int
    range_min: float
    range_max: float
    global_mean: float
    # raw labels in dense-index order; user_labels[k] is the raw ID of user k
    user_labels: tuple = field(default=(), repr=False, compare=False)
    item_labels: tuple = field(default=(), repr=False, compare=False)

    def __post_init__(self):
        if self.m < 1 or self.n < 1:
            raise DataError("dataset must contain at least one user and one item")
        if not self.range_min < self.range_max:
            raise DataError(f"invalid rating range [{self.range_min}, {self.range_max}]")


@dataclass(frozen=True)
class DatasetSplit:
    train: Ratings
    validation: Ratings
    test: Ratings
    seed: int
    meta: DatasetMeta | None = None

    @property
    def global_mean(self) -> float:
        return float(self.train.ratings.mean())

    def parts(self) -> dict[str, Ratings]:
        return {"train": self.train, "validation": self.validation, "test": self.test}


@dataclass(frozen=True)
class ItemMetadata:
    """Category labels per dense item index."""

    categories: dict[int, tuple[str, ...]]

    def labels(self) -> list[str]:
        return sorted({c for cats in self.categories.values() for c in cats})


def _split_line(line: str, delimiter: str) -> list[str]:
    if delimiter in (" ", "whitespace"):
        return line.split()
    return line.split(delimiter)


def _parse_rows(path, delimiter, range_min, range_max, has_header, min_fields, max_fields):
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8", errors="replace")
    except FileNotFoundError:
        raise DataError(f"dataset file not found: {path}") from None
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc}") from None

    user_map: dict[str, int] = {}
    item_map: dict[str, int] = {}
    users, items, ratings = [], [], []
    lines = text.splitlines()
    start = 1 if has_header else 0
    for lineno in range(start, len(lines)):
        line = lines[lineno].strip()
        if not line:
            continue
        fields = [f.strip() for f in _split_line(line, delimiter)]
        if len(fields) < min_fields or (max_fields is not None and len(fields) > max_fields):
            raise ParseError(f"{path}:{lineno + 1}: expected {min_fields} fields, got {len(fields)}")
        raw_u, raw_i, raw_r = fields[0], fields[1], fields[2]
        try:
            r = float(raw_r)
        except ValueError:
            raise ParseError(f"{path}:{lineno + 1}: bad rating {raw_r!r}") from None
        if not np.isfinite(r):
            raise ParseError(f"{path}:{lineno + 1}: non-finite rating {raw_r!r}")
        if r < range_min or r > range_max:
            raise RangeError(
                f"{path}:{lineno + 1}: rating {r} outside [{range_min}, {range_max}]"
            )
        users.append(user_map.setdefault(raw_u, len(user_map)))
        items.append(item_map.setdefault(raw_i, len(item_map)))
        ratings.append(r)

    if not ratings:
        raise DataError(f"{path}: no interactions")
    triples = Ratings(np.array(users), np.array(items), np.array(ratings))
    meta = DatasetMeta(
        m=len(user_map),
        n=len(item_map),
        N=len(triples),
        range_min=float(range_min),
        range_max=float(range_max),
        global_mean=float(triples.ratings.mean()),
        user_labels=tuple(user_map),
        item_labels=tuple(item_map),
    )
    return triples, meta


def load_movielens_100k(path) -> tuple[Ratings, DatasetMeta]:
    """Read a tab-separated ``u.data`` file (user, item, rating, timestamp)."""
    return _parse_rows(path, "\t", 1.0, 5.0, False, 3, 4)


def load_movielens_1m(path) -> tuple[Ratings, DatasetMeta]:
    return load_generic_delimited(path, "::", 1.0, 5.0, False)


def load_generic_delimited(path, delimiter, range_min, range_max, has_header=False):
    """Read user, item, rating from the first three columns of a delimited file.

    ``delimiter`` is a single character or the literal ``"::"``. Extra columns
    are ignored.
    """
    if delimiter != "::" and len(delimiter) != 1 and delimiter != "whitespace":
        raise DataError(f"delimiter must be one character or '::', got {delimiter!r}")
    return _parse_rows(path, delimiter, float(range_min), float(range_max), has_header, 3, None)


def split_dataset(triples: Ratings, seed: int, meta: DatasetMeta | None = None) -> DatasetSplit:
    """Shuffle then slice 80/10/10.

    ``|train| = round(0.8 N)`` (half rounds up); the rest is halved between
    validation and test, with an odd leftover row going to test.
    """
    N = len(triples)
    if N < 10:
        raise DataError("dataset too small to split")
    n_train = int(np.floor(0.8 * N + 0.5))
    n_val = (N - n_train) // 2
    order = np.random.default_rng(seed).permutation(N)
    train = triples[np.sort(order[:n_train])]
    val = triples[np.sort(order[n_train:n_train + n_val])]
    test = triples[np.sort(order[n_train + n_val:])]
    if meta is not None:
        meta = replace(meta, global_mean=float(train.ratings.mean()))
    return DatasetSplit(train, val, test, seed, meta)


def fingerprint(triples: Ratings, meta: DatasetMeta) -> str:
    """Content hash of the dense triples and the declared range."""
    h = hashlib.sha256()
    h.update(f"{meta.m}:{meta.n}:{meta.N}:{meta.range_min!r}:{meta.range_max!r}".encode())
    h.update(triples.users.astype("<i8").tobytes())
    h.update(triples.items.astype("<i8").tobytes())
    h.update(triples.ratings.astype("<f8").tobytes())
    return h.hexdigest()


MANIFEST_HEADER = "split\tuser_index\titem_index\trating"


def write_split_manifest(split: DatasetSplit, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"# seed={split.seed}\n")
        fh.write(MANIFEST_HEADER + "\n")
        for name, part in split.parts().items():
            for u, i, r in zip(part.users.tolist(), part.items.tolist(), part.ratings.tolist()):
                fh.write(f"{name}\t{u}\t{i}\t{r!r}\n")


def read_split_manifest(path, meta: DatasetMeta | None = None) -> DatasetSplit:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"split manifest not found: {path}")
    cols: dict[str, tuple[list, list, list]] = {k: ([], [], []) for k in ("train", "validation", "test")}
    seed = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("#"):
                if line.startswith("# seed="):
                    seed = int(line[len("# seed="):])
                continue
            if line == MANIFEST_HEADER:
                continue
            fields = line.split("\t")
            if len(fields) != 4 or fields[0] not in cols:
                raise ParseError(f"{path}:{lineno}: malformed manifest row")
            u, i, r = cols[fields[0]]
            u.append(int(fields[1]))
            i.append(int(fields[2]))
            r.append(float(fields[3]))
    parts = {k: Ratings(np.array(u, dtype=np.int64), np.array(i, dtype=np.int64), np.array(r))
             for k, (u, i, r) in cols.items()}
    if meta is not None:
        meta = replace(meta, global_mean=float(parts["train"].ratings.mean()))
    return DatasetSplit(parts["train"], parts["validation"], parts["test"], seed, meta)


def load_item_metadata(path, meta: DatasetMeta, delimiter="\t", id_column=0,
                       category_column=-1, category_sep="|", has_header=False) -> ItemMetadata:
    """Map raw item IDs in a delimited file to categories of dense items.

    Works for ``movies.dat`` (``"::"``, categories in the last column) and
    simple ``id<TAB>cat|cat`` files. Items absent from the ratings are dropped.
    """
    index = {label: k for k, label in enumerate(meta.item_labels)}
    cats: dict[int, tuple[str, ...]] = {}
    with open(path, encoding="utf-8", errors="replace") as fh:
        for lineno, line in enumerate(fh, 1):
            if has_header and lineno == 1:
                continue
            line = line.rstrip("\r\n")
            if not line:
                continue
            fields = line.split(delimiter)
            k = index.get(fields[id_column].strip())
            if k is None:
                continue
            raw = fields[category_column].strip()
            cats[k] = tuple(c for c in raw.split(category_sep) if c)
    return ItemMetadata(cats)


ML100K_GENRES = (
    "unknown", "Action", "Adventure", "Animation", "Children's", "Comedy", "Crime",
    "Documentary", "Drama", "Fantasy", "Film-Noir", "Horror", "Musical", "Mystery",
    "Romance", "Sci-Fi", "Thriller", "War", "Western",
)


def load_movielens_100k_items(path, meta: DatasetMeta) -> ItemMetadata:
    """Read the pipe-separated ``u.item`` file with its 19 genre flag columns."""
    index = {label: k for k, label in enumerate(meta.item_labels)}
    cats: dict[int, tuple[str, ...]] = {}
    with open(path, encoding="latin-1") as fh:
        for lineno, line in enumerate(fh, 1):
            fields = line.rstrip("\r\n").split("|")
            if len(fields) < 5 + len(ML100K_GENRES):
                if line.strip():
                    raise ParseError(f"{path}:{lineno}: expected 24 fields")
                continue
            k = index.get(fields[0])
            if k is None:
                continue
            flags = fields[-len(ML100K_GENRES):]
            cats[k] = tuple(g for g, f in zip(ML100K_GENRES, flags) if f.strip() == "1")
    return ItemMetadata(cats)
