"""Data containers, treatment support, fold splitting and seeded RNG streams."""

from __future__ import annotations

import csv
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class DataError(ValueError):
    """Raised when input data violates a container invariant."""


@dataclass(frozen=True)
class TreatmentSupport:
    """Compact treatment interval ``[c_minus, c_plus]`` with a policy grid size."""

    c_minus: float
    c_plus: float
    grid_size: int = 51

    def __post_init__(self):
        if not (np.isfinite(self.c_minus) and np.isfinite(self.c_plus)):
            raise DataError("support endpoints must be finite")
        if not self.c_minus < self.c_plus:
            raise DataError(f"empty support [{self.c_minus}, {self.c_plus}]")
        if int(self.grid_size) < 2:
            raise DataError(f"grid_size must be >= 2, got {self.grid_size}")

    @property
    def width(self) -> float:
        return self.c_plus - self.c_minus

    @property
    def midpoint(self) -> float:
        return 0.5 * (self.c_minus + self.c_plus)

    def contains(self, a) -> np.ndarray:
        a = np.asarray(a, dtype=float)
        return (a >= self.c_minus) & (a <= self.c_plus)

    def to_dict(self) -> dict:
        return {"c_minus": self.c_minus, "c_plus": self.c_plus, "grid_size": self.grid_size}

    @classmethod
    def from_dict(cls, d: dict) -> "TreatmentSupport":
        return cls(float(d["c_minus"]), float(d["c_plus"]), int(d.get("grid_size", 51)))


def _as_matrix(v, n, name):
    m = np.asarray(v, dtype=float)
    if m.ndim == 1:
        m = m.reshape(n, -1) if n > 0 else m.reshape(0, 0)
    if m.ndim != 2:
        raise DataError(f"{name} must be a matrix, got shape {m.shape}")
    return m


@dataclass(frozen=True, eq=False)
class Dataset:
    """Observational sample ``(Y, A, Z, W, X)``.

    Arrays are copied and made read-only, so a constructed ``Dataset`` always
    satisfies its invariants.
    """

    y: np.ndarray
    a: np.ndarray
    z: np.ndarray
    w: np.ndarray
    x: np.ndarray
    support: TreatmentSupport

    def __post_init__(self):
        y = np.array(self.y, dtype=float).ravel()
        n = y.shape[0]
        if n == 0:
            raise DataError("empty dataset")
        a = np.array(self.a, dtype=float).ravel()
        z = _as_matrix(np.array(self.z, dtype=float), n, "z")
        w = _as_matrix(np.array(self.w, dtype=float), n, "w")
        x = _as_matrix(np.array(self.x, dtype=float), n, "x")
        for name, arr in (("a", a), ("z", z), ("w", w), ("x", x)):
            if arr.shape[0] != n:
                raise DataError(f"{name} has {arr.shape[0]} rows, expected {n}")
        for name, arr in (("y", y), ("a", a), ("z", z), ("w", w), ("x", x)):
            bad = ~np.isfinite(arr)
            if bad.any():
                row = int(np.argwhere(bad)[0][0])
                raise DataError(f"non-finite value in {name}, row {row}")
        outside = ~self.support.contains(a)
        if outside.any():
            raise DataError(f"treatment outside support, row {int(np.flatnonzero(outside)[0])}")
        for name, arr in (("y", y), ("a", a), ("z", z), ("w", w), ("x", x)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def u(self) -> np.ndarray:
        """Bridge inputs ``(A, W, X)``."""
        return np.column_stack([self.a, self.w, self.x])

    @property
    def v(self) -> np.ndarray:
        """Moment inputs ``(A, Z, X)``."""
        return np.column_stack([self.a, self.z, self.x])

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.y[idx], self.a[idx], self.z[idx], self.w[idx], self.x[idx], self.support)

    def with_outcome(self, y) -> "Dataset":
        return Dataset(y, self.a, self.z, self.w, self.x, self.support)


@dataclass(frozen=True, eq=False)
class FoldAssignment:
    fold_of: np.ndarray
    k: int

    def __post_init__(self):
        f = np.array(self.fold_of, dtype=int)
        counts = np.bincount(f, minlength=self.k)
        if f.min() < 0 or f.max() >= self.k or (counts == 0).any():
            raise DataError("every fold must be nonempty and indexed in [0, K)")
        f.setflags(write=False)
        object.__setattr__(self, "fold_of", f)

    def test_index(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of == k)

    def train_index(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of != k)


@dataclass(frozen=True)
class RngState:
    """Counter-based random state with named, independent streams.

    ``stream("dgp")`` and ``stream("folds", 3)`` return fresh Philox generators
    keyed only by ``(seed, name, *ids)``, so draws do not depend on call order.
    """

    seed: int
    path: tuple = field(default_factory=tuple)

    def child(self, name: str, *ids: int) -> "RngState":
        return RngState(self.seed, self.path + (name, *ids))

    def stream(self, name: str, *ids: int) -> np.random.Generator:
        key = [int(self.seed) & 0xFFFFFFFFFFFFFFFF]
        for part in self.path + (name, *ids):
            if isinstance(part, str):
                key.append(zlib.crc32(part.encode()))
            else:
                key.append(int(part) & 0xFFFFFFFF)
        return np.random.Generator(np.random.Philox(np.random.SeedSequence(key)))


def make_treatment_grid(support: TreatmentSupport) -> np.ndarray:
    grid = np.linspace(support.c_minus, support.c_plus, support.grid_size)
    grid[-1] = support.c_plus
    return grid


def split_folds(n: int, k: int, rng: RngState | np.random.Generator) -> FoldAssignment:
    """Random balanced partition of ``range(n)`` into ``k`` folds."""
    if k < 2 or k > n:
        raise DataError(f"need 2 <= K <= n, got K={k}, n={n}")
    gen = rng.stream("folds") if isinstance(rng, RngState) else rng
    perm = gen.permutation(n)
    fold_of = np.empty(n, dtype=int)
    fold_of[perm] = np.arange(n) % k
    return FoldAssignment(fold_of, k)


def _block_columns(header, prefix):
    cols = [h for h in header if h.startswith(prefix) and h[len(prefix):].isdigit()]
    return sorted(cols, key=lambda h: int(h[len(prefix):]))


def load_dataset_csv(path, support: TreatmentSupport, schema: dict | None = None) -> Dataset:
    """Read a dataset from CSV.

    ``schema`` maps the roles ``y``, ``a``, ``z``, ``w``, ``x`` to a column name
    (``y``, ``a``) or a column-name prefix (``z``, ``w``, ``x``; columns are
    ``z1..zk`` etc.). By default the role names themselves are used.
    """
    schema = {"y": "y", "a": "a", "z": "z", "w": "w", "x": "x", **(schema or {})}
    with open(Path(path), newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError("missing header row") from None
        rows = [r for r in reader if r]
    if not rows:
        raise DataError("empty dataset")

    cols = {}
    for role in ("y", "a"):
        if schema[role] not in header:
            raise DataError(f"missing column {schema[role]!r}")
        cols[role] = [header.index(schema[role])]
    for role in ("z", "w", "x"):
        names = _block_columns(header, schema[role])
        if not names:
            raise DataError(f"missing column {schema[role]}1")
        cols[role] = [header.index(h) for h in names]

    values = np.empty((len(rows), len(header)))
    for i, row in enumerate(rows):
        if len(row) != len(header):
            raise DataError(f"row {i} has {len(row)} cells, expected {len(header)}")
        for j, cell in enumerate(row):
            try:
                values[i, j] = float(cell)
            except ValueError:
                raise DataError(f"non-numeric cell {cell!r} in column {header[j]!r}, row {i}") from None

    return Dataset(
        y=values[:, cols["y"][0]],
        a=values[:, cols["a"][0]],
        z=values[:, cols["z"]],
        w=values[:, cols["w"]],
        x=values[:, cols["x"]],
        support=support,
    )


def save_dataset_csv(dataset: Dataset, path) -> None:
    header = (
        ["y", "a"]
        + [f"z{j + 1}" for j in range(dataset.z.shape[1])]
        + [f"w{j + 1}" for j in range(dataset.w.shape[1])]
        + [f"x{j + 1}" for j in range(dataset.x.shape[1])]
    )
    data = np.column_stack([dataset.y, dataset.a, dataset.z, dataset.w, dataset.x])
    with open(Path(path), "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in data:
            writer.writerow([repr(float(v)) for v in row])
