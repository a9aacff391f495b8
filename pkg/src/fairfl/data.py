"""Datasets, file ingestion, synthetic generation and client partitioning."""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .numerics import Rng

EMB_MAGIC = b"FFLEMB01"
_HEADER = struct.Struct("<8sII")
VARIANCE_FLOOR = 1e-12


class DataError(ValueError):
    """Raised for malformed input files or impossible partition requests."""


@dataclass(frozen=True)
class Sample:
    x: np.ndarray
    s: int
    y: int


@dataclass
class ClientDataset:
    """Column-major view of a list of samples.

    ``X`` is ``(n, d)``; ``s`` and ``y`` are int8 vectors of 0/1.  The pool
    returned by the loaders is a ``ClientDataset`` with ``client_id=-1``.
    """

    X: np.ndarray
    s: np.ndarray
    y: np.ndarray
    client_id: int = -1

    def __post_init__(self):
        self.X = np.ascontiguousarray(self.X, dtype=np.float64)
        if self.X.ndim != 2:
            raise DataError(f"features must be 2-d, got shape {self.X.shape}")
        self.s = np.asarray(self.s, dtype=np.int8).reshape(-1)
        self.y = np.asarray(self.y, dtype=np.int8).reshape(-1)
        n = self.X.shape[0]
        if self.s.shape[0] != n or self.y.shape[0] != n:
            raise DataError("X, s and y must have the same number of rows")
        for name, col in (("s", self.s), ("y", self.y)):
            bad = col[(col != 0) & (col != 1)]
            if bad.size:
                raise DataError(f"{name} must be binary, found value {int(bad[0])}")
        if not np.all(np.isfinite(self.X)):
            raise DataError("features contain non-finite values")

    @classmethod
    def from_samples(cls, samples: Sequence[Sample], client_id: int = -1, dim: int | None = None):
        if not samples:
            d = 0 if dim is None else dim
            return cls(np.zeros((0, d)), np.zeros(0), np.zeros(0), client_id)
        X = np.stack([np.asarray(smp.x, dtype=np.float64) for smp in samples])
        return cls(X, [smp.s for smp in samples], [smp.y for smp in samples], client_id)

    @property
    def samples(self) -> list[Sample]:
        return [Sample(self.X[i].copy(), int(self.s[i]), int(self.y[i])) for i in range(len(self))]

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    def group_counts(self) -> tuple[int, int]:
        n1 = int(self.s.sum())
        return len(self) - n1, n1

    def subset(self, idx, client_id: int | None = None) -> "ClientDataset":
        idx = np.asarray(idx, dtype=np.int64)
        cid = self.client_id if client_id is None else client_id
        return ClientDataset(self.X[idx], self.s[idx], self.y[idx], cid)

    def require_both_groups(self) -> None:
        n0, n1 = self.group_counts()
        if n0 == 0 or n1 == 0:
            missing = 0 if n0 == 0 else 1
            raise DataError(f"client {self.client_id}: no samples with s={missing}")


# --------------------------------------------------------------------------
# CSV
# --------------------------------------------------------------------------


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, X: np.ndarray) -> "Standardizer":
        mean = X.mean(axis=0) if len(X) else np.zeros(X.shape[1])
        var = X.var(axis=0) if len(X) else np.ones(X.shape[1])
        std = np.sqrt(np.maximum(var, VARIANCE_FLOOR))
        return cls(mean, std)

    def apply(self, X: np.ndarray) -> np.ndarray:
        out = (X - self.mean) / self.std
        # degenerate columns map to exactly zero
        out[:, np.sqrt(VARIANCE_FLOOR) >= self.std] = 0.0
        return out

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}


@dataclass
class CsvSchema:
    features: list[str] | None = None  # None: every column except s/y
    s_column: str = "s"
    y_column: str = "y"


def _parse_binary(raw: str, column: str, row: int) -> int:
    try:
        val = float(raw)
    except ValueError:
        raise DataError(f"row {row}: column {column!r} is not numeric: {raw!r}") from None
    if val not in (0.0, 1.0):
        raise DataError(f"row {row}: column {column!r} must be 0 or 1, got {raw!r}")
    return int(val)


def load_csv(path, schema: CsvSchema | None = None, stats: Standardizer | None = None):
    """Read a headered CSV into a standardized pool.

    Returns ``(dataset, stats)``.  Pass the returned ``stats`` back in when
    loading the test split so both use the training statistics.
    """
    schema = schema or CsvSchema()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataError(f"{path}: empty file, header row required") from None
        for col in (schema.s_column, schema.y_column):
            if col not in header:
                raise DataError(f"{path}: missing column {col!r}")
        feats = schema.features
        if feats is None:
            feats = [h for h in header if h not in (schema.s_column, schema.y_column)]
        missing = [f for f in feats if f not in header]
        if missing:
            raise DataError(f"{path}: missing feature columns {missing}")
        fidx = [header.index(f) for f in feats]
        si, yi = header.index(schema.s_column), header.index(schema.y_column)

        rows, s_vals, y_vals = [], [], []
        for rowno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataError(
                    f"row {rowno}: expected {len(header)} fields, found {len(row)}"
                )
            try:
                rows.append([float(row[i]) for i in fidx])
            except ValueError:
                raise DataError(f"row {rowno}: non-numeric feature value") from None
            s_vals.append(_parse_binary(row[si], schema.s_column, rowno))
            y_vals.append(_parse_binary(row[yi], schema.y_column, rowno))

    X = np.asarray(rows, dtype=np.float64).reshape(len(rows), len(feats))
    if not np.all(np.isfinite(X)):
        raise DataError(f"{path}: non-finite feature values")
    if stats is None:
        stats = Standardizer.fit(X)
    return ClientDataset(stats.apply(X), s_vals, y_vals), stats


def write_csv(path, data: ClientDataset, feature_names: Sequence[str] | None = None) -> None:
    names = list(feature_names) if feature_names else [f"f{j}" for j in range(data.dim)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names + ["s", "y"])
        for i in range(len(data)):
            w.writerow([repr(float(v)) for v in data.X[i]] + [int(data.s[i]), int(data.y[i])])


# --------------------------------------------------------------------------
# Embedding binary
# --------------------------------------------------------------------------
# layout: 8-byte magic "FFLEMB01", u32 n, u32 d (little-endian),
# n*d little-endian f32 row-major, n bytes s, n bytes y


def write_embeddings(path, data: ClientDataset) -> None:
    n, d = data.X.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(EMB_MAGIC, n, d))
        fh.write(data.X.astype("<f4").tobytes(order="C"))
        fh.write(data.s.astype(np.uint8).tobytes())
        fh.write(data.y.astype(np.uint8).tobytes())


def load_embeddings(path) -> ClientDataset:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise DataError(f"{path}: header truncated ({len(raw)} of {_HEADER.size} bytes)")
    magic, n, d = _HEADER.unpack_from(raw)
    if magic != EMB_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}")
    expected = _HEADER.size + 4 * n * d + 2 * n
    if len(raw) != expected:
        raise DataError(f"{path}: expected {expected} bytes for n={n}, d={d}, found {len(raw)}")
    off = _HEADER.size
    X = np.frombuffer(raw, dtype="<f4", count=n * d, offset=off).astype(np.float64)
    off += 4 * n * d
    s = np.frombuffer(raw, dtype=np.uint8, count=n, offset=off)
    y = np.frombuffer(raw, dtype=np.uint8, count=n, offset=off + n)
    return ClientDataset(X.reshape(n, d), s, y)


# --------------------------------------------------------------------------
# Synthetic data
# --------------------------------------------------------------------------


@dataclass
class SynthSpec:
    """Gaussian class-conditional generator.

    ``means`` maps ``(y, s)`` to a length-``d`` mean; every cell shares the
    isotropic scale ``sigma``.
    """

    d: int
    means: dict[tuple[int, int], np.ndarray]
    sigma: float = 1.0
    p_s1: float = 0.5
    p_y1_given_s: tuple[float, float] = (0.5, 0.5)
    n: int = 1000

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError("sigma must be positive")
        if not 0.0 <= self.p_s1 <= 1.0:
            raise ValueError("p_s1 must lie in [0, 1]")
        if any(not 0.0 <= p <= 1.0 for p in self.p_y1_given_s):
            raise ValueError("P(Y=1|S=s) must lie in [0, 1]")
        if self.n < 0:
            raise ValueError("n must be non-negative")
        self.means = {k: np.asarray(v, dtype=np.float64) for k, v in self.means.items()}
        for key in [(0, 0), (0, 1), (1, 0), (1, 1)]:
            if key not in self.means:
                raise ValueError(f"missing mean for (y, s) = {key}")
            if self.means[key].shape != (self.d,):
                raise ValueError(f"mean for {key} must have length {self.d}")

    @classmethod
    def from_separations(cls, d: int, label_sep: float, attr_sep: float, **kw) -> "SynthSpec":
        """Means ``label_sep*(y-1/2)`` on axis 0 and ``attr_sep*(s-1/2)`` on axis 1."""
        if d < 2:
            raise ValueError("need d >= 2 for separate label and attribute axes")
        means = {}
        for y in (0, 1):
            for s in (0, 1):
                m = np.zeros(d)
                m[0] = label_sep * (y - 0.5)
                m[1] = attr_sep * (s - 0.5)
                means[(y, s)] = m
        return cls(d=d, means=means, **kw)


def synth_gaussian(spec: SynthSpec, rng: Rng) -> ClientDataset:
    g = rng.generator
    n = spec.n
    s = (g.random(n) < spec.p_s1).astype(np.int8)
    p_y = np.where(s == 1, spec.p_y1_given_s[1], spec.p_y1_given_s[0])
    y = (g.random(n) < p_y).astype(np.int8)
    X = g.normal(0.0, spec.sigma, size=(n, spec.d))
    for key, mean in spec.means.items():
        mask = (y == key[0]) & (s == key[1])
        X[mask] += mean
    return ClientDataset(X, s, y)


# --------------------------------------------------------------------------
# Partitioning
# --------------------------------------------------------------------------


@dataclass
class PartitionSpec:
    """How to carve a pool into client shards.

    ``fixed`` uses ``counts``: one ``(count_s0, count_s1)`` pair per client.
    ``dirichlet`` draws each client's share of ``s=0`` from
    ``Beta(alpha*p, alpha*(1-p))`` with ``p = under_ratio`` for the first
    ``ceil(fraction_under*clients)`` clients and ``over_ratio`` for the rest.
    """

    mode: str = "fixed"
    counts: list[tuple[int, int]] = field(default_factory=list)
    clients: int = 0
    alpha_under: float = 0.5
    alpha_over: float = 1.0
    fraction_under: float = 0.2
    samples_per_client: int = 0
    under_ratio: float = 0.2
    over_ratio: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.mode not in ("fixed", "dirichlet"):
            raise ValueError(f"unknown partition mode {self.mode!r}")
        self.counts = [tuple(int(c) for c in pair) for pair in self.counts]
        if self.mode == "fixed":
            if not self.counts:
                raise ValueError("fixed partition needs at least one client count pair")
            if any(c < 0 for pair in self.counts for c in pair) or any(sum(p) == 0 for p in self.counts):
                raise ValueError("client counts must be non-negative and not all zero")
        else:
            if self.clients < 1 or self.samples_per_client < 2:
                raise ValueError("dirichlet partition needs clients >= 1 and samples_per_client >= 2")
            if self.alpha_under <= 0 or self.alpha_over <= 0:
                raise ValueError("alpha must be positive")
            if not 0.0 <= self.fraction_under <= 1.0:
                raise ValueError("fraction_under must lie in [0, 1]")
            for r in (self.under_ratio, self.over_ratio):
                if not 0.0 < r < 1.0:
                    raise ValueError("target ratios must lie in (0, 1)")

    @property
    def num_under(self) -> int:
        if self.mode == "fixed":
            raise ValueError("num_under is only defined for dirichlet partitions")
        return math.ceil(self.fraction_under * self.clients - 1e-9)


def _group_pools(data: ClientDataset, rng: Rng) -> list[list[int]]:
    pools = []
    for grp in (0, 1):
        idx = np.flatnonzero(data.s == grp)
        pools.append(idx[rng.permutation(idx.shape[0])].tolist())
    return pools


def _take(data: ClientDataset, counts: Sequence[tuple[int, int]], rng: Rng) -> list[ClientDataset]:
    pools = _group_pools(data, rng)
    need = [sum(c[g] for c in counts) for g in (0, 1)]
    for g in (0, 1):
        if need[g] > len(pools[g]):
            raise DataError(
                f"group s={g}: requested {need[g]} samples but pool has {len(pools[g])} "
                f"(short by {need[g] - len(pools[g])})"
            )
    out, cursor = [], [0, 0]
    for cid, pair in enumerate(counts):
        idx = []
        for g in (0, 1):
            idx.extend(pools[g][cursor[g]:cursor[g] + pair[g]])
            cursor[g] += pair[g]
        out.append(data.subset(sorted(idx), client_id=cid))
    return out


def partition_fixed(data: ClientDataset, counts: Sequence[tuple[int, int]], rng: Rng) -> list[ClientDataset]:
    """Disjoint shards with exactly ``counts[i] = (n_s0, n_s1)`` samples."""
    return _take(data, counts, rng)


def dirichlet_counts(spec: PartitionSpec, rng: Rng) -> list[tuple[int, int]]:
    """Per-client ``(n_s0, n_s1)`` drawn from the two-component Beta mixture."""
    n = spec.samples_per_client
    counts = []
    for cid in range(spec.clients):
        under = cid < spec.num_under
        alpha = spec.alpha_under if under else spec.alpha_over
        target = spec.under_ratio if under else spec.over_ratio
        p0 = float(rng.beta(alpha * target, alpha * (1.0 - target)))
        n0 = min(max(int(round(p0 * n)), 1), n - 1)
        counts.append((n0, n - n0))
    return counts


def partition_dirichlet(data: ClientDataset, spec: PartitionSpec, rng: Rng) -> list[ClientDataset]:
    counts = dirichlet_counts(spec, rng.child(0))
    return _take(data, counts, rng.child(1))


def partition(data: ClientDataset, spec: PartitionSpec, rng: Rng) -> list[ClientDataset]:
    if spec.mode == "fixed":
        return partition_fixed(data, spec.counts, rng)
    return partition_dirichlet(data, spec, rng)


def mirrored_counts(train: Sequence[ClientDataset], scale: float) -> list[tuple[int, int]]:
    """Test-shard sizes that keep each client's train group proportions."""
    out = []
    for shard in train:
        n0, n1 = shard.group_counts()
        out.append((max(int(round(n0 * scale)), 1), max(int(round(n1 * scale)), 1)))
    return out


def train_test_split(data: ClientDataset, test_fraction: float, rng: Rng):
    if not 0.0 < test_fraction < 1.0:
        raise ValueError("test_fraction must lie in (0, 1)")
    perm = rng.permutation(len(data))
    n_test = int(round(test_fraction * len(data)))
    return data.subset(np.sort(perm[n_test:])), data.subset(np.sort(perm[:n_test]))
