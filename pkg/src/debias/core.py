"""Observations, multi-source datasets and biasing functions.

A dataset collection stores its observations column-wise (one array per
field, rows in source-major order) so that biasing functions can be
evaluated over thousands of rows at once.  Single :class:`Observation`
objects are still available for row-at-a-time work.
"""

from __future__ import annotations

import csv
import hashlib
import io
from dataclasses import dataclass, field, replace
from typing import ClassVar, Mapping, Sequence

import numpy as np

from .errors import (
    ConfigError,
    DataError,
    LengthMismatch,
    MissingField,
    NonFinite,
    UnsupportedObservation,
)

FLOAT_FMT = "{:.17g}"


def _frozen(a, dtype=None):
    if a is None:
        return None
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Observation:
    """A single observation ``z = (x, y)``.

    ``label`` uses ``-1`` when absent.  ``source`` is filled in when the
    observation is read out of a :class:`DatasetCollection`.
    """

    id: int
    label: int = -1
    stratum: int | None = None
    embedding: tuple[float, ...] | None = None
    features: tuple[float, ...] | None = None
    source: int | None = None


@dataclass(frozen=True, eq=False)
class Rows:
    """Column view over a block of observations, the unit biasing functions act on."""

    ids: np.ndarray
    sources: np.ndarray
    labels: np.ndarray
    strata: np.ndarray | None = None
    embeddings: np.ndarray | None = None

    def __len__(self):
        return len(self.ids)

    @classmethod
    def from_observation(cls, obs: Observation) -> "Rows":
        emb = None
        if obs.embedding is not None:
            emb = np.asarray(obs.embedding, dtype=float).reshape(1, -1)
        return cls(
            ids=np.array([obs.id], dtype=np.int64),
            sources=np.array([-1 if obs.source is None else obs.source], dtype=np.int64),
            labels=np.array([obs.label], dtype=np.int64),
            strata=None if obs.stratum is None else np.array([obs.stratum], dtype=np.int64),
            embeddings=emb,
        )


@dataclass(frozen=True, eq=False)
class SourceDataset:
    """Observations drawn from one biased source ``k``."""

    index: int
    ids: np.ndarray
    labels: np.ndarray
    strata: np.ndarray | None = None
    embeddings: np.ndarray | None = None
    features: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.ids)
        if n < 1:
            raise DataError(f"source {self.index} is empty")
        for name in ("labels", "strata", "embeddings", "features"):
            a = getattr(self, name)
            if a is not None and len(a) != n:
                raise LengthMismatch(f"source {self.index}: {name} has {len(a)} rows, expected {n}")
        if self.embeddings is not None and not np.all(np.isfinite(self.embeddings)):
            raise NonFinite(f"source {self.index}: non-finite embedding")
        object.__setattr__(self, "ids", _frozen(self.ids, np.int64))
        object.__setattr__(self, "labels", _frozen(self.labels, np.int64))
        object.__setattr__(self, "strata", _frozen(self.strata, np.int64))
        object.__setattr__(self, "embeddings", _frozen(self.embeddings, float))
        object.__setattr__(self, "features", _frozen(self.features, float))

    @property
    def n(self) -> int:
        return len(self.ids)

    def __len__(self) -> int:
        return len(self.ids)

    @classmethod
    def from_observations(cls, index: int, observations: Sequence[Observation]) -> "SourceDataset":
        obs = list(observations)
        if not obs:
            raise DataError(f"source {index} is empty")

        def column(name, dtype):
            values = [getattr(o, name) for o in obs]
            if all(v is None for v in values):
                return None
            if any(v is None for v in values):
                raise MissingField(f"source {index}: field {name!r} present on some observations only")
            return np.array(values, dtype=dtype)

        return cls(
            index=index,
            ids=np.array([o.id for o in obs], dtype=np.int64),
            labels=np.array([o.label for o in obs], dtype=np.int64),
            strata=column("stratum", np.int64),
            embeddings=column("embedding", float),
            features=column("features", float),
        )

    @property
    def observations(self) -> list[Observation]:
        return [self.observation(i) for i in range(self.n)]

    def observation(self, i: int) -> Observation:
        return Observation(
            id=int(self.ids[i]),
            label=int(self.labels[i]),
            stratum=None if self.strata is None else int(self.strata[i]),
            embedding=None if self.embeddings is None else tuple(float(v) for v in self.embeddings[i]),
            features=None if self.features is None else tuple(float(v) for v in self.features[i]),
            source=self.index,
        )


class DatasetCollection:
    """``K`` source datasets concatenated in source-major order.

    Parameters
    ----------
    sources : sequence of SourceDataset
        One dataset per source, with ``sources[k].index == k``.
    M : int, optional
        Number of classes.  Inferred from the largest label when omitted.
    """

    def __init__(self, sources: Sequence[SourceDataset], M: int | None = None):
        sources = list(sources)
        if not sources:
            raise DataError("a dataset collection needs at least one source")
        for k, s in enumerate(sources):
            if s.index != k:
                raise DataError(f"source at position {k} has index {s.index}")
        self.sources = tuple(sources)
        self.K = len(sources)
        self.n_k = np.array([s.n for s in sources], dtype=np.int64)
        self.n = int(self.n_k.sum())
        self.lam = self.n_k / self.n
        self.lambda_min = float(self.lam.min())

        self.source = _frozen(np.repeat(np.arange(self.K), self.n_k), np.int64)
        self.obs = _frozen(np.concatenate([np.arange(s.n) for s in sources]), np.int64)
        self.ids = _frozen(np.concatenate([s.ids for s in sources]), np.int64)
        self.labels = _frozen(np.concatenate([s.labels for s in sources]), np.int64)
        self.strata = self._stack("strata")
        self.embeddings = self._stack("embeddings")
        self.features = self._stack("features")

        max_label = int(self.labels.max())
        if M is None:
            M = max_label + 1 if max_label >= 0 else 0
        elif max_label >= M:
            raise DataError(f"label {max_label} out of range for M={M}")
        self.M = int(M)

    def _stack(self, name):
        parts = [getattr(s, name) for s in self.sources]
        if all(p is None for p in parts):
            return None
        if any(p is None for p in parts):
            raise MissingField(f"field {name!r} present in some sources only")
        return _frozen(np.concatenate(parts), None)

    @property
    def lambda_(self) -> np.ndarray:
        return self.lam

    def __len__(self):
        return self.n

    def rows(self) -> Rows:
        return Rows(
            ids=self.ids,
            sources=self.source,
            labels=self.labels,
            strata=self.strata,
            embeddings=self.embeddings,
        )

    def observation(self, r: int) -> Observation:
        return self.sources[int(self.source[r])].observation(int(self.obs[r]))

    @classmethod
    def from_arrays(cls, source, ids, labels, strata=None, embeddings=None, features=None, M=None):
        """Build a collection from flat columns; rows are grouped by ``source`` (stable)."""
        source = np.asarray(source, dtype=np.int64)
        order = np.argsort(source, kind="stable")
        K = int(source.max()) + 1
        pick = lambda a: None if a is None else np.asarray(a)[order]  # noqa: E731
        source, ids, labels = source[order], pick(ids), pick(labels)
        strata, embeddings, features = pick(strata), pick(embeddings), pick(features)
        out = []
        for k in range(K):
            m = source == k
            if not m.any():
                raise DataError(f"source {k} has no rows")
            out.append(
                SourceDataset(
                    index=k,
                    ids=ids[m],
                    labels=labels[m],
                    strata=None if strata is None else strata[m],
                    embeddings=None if embeddings is None else embeddings[m],
                    features=None if features is None else features[m],
                )
            )
        return cls(out, M=M)


# --------------------------------------------------------------------------
# biasing functions


@dataclass(frozen=True, kw_only=True)
class BiasSpec:
    """Declarative biasing function ``omega``.

    Every kind computes a raw nonnegative value; the evaluated value is
    ``clip(raw * scale * multiplier, 0, clamp_max)``.  ``scale`` is set by
    :func:`build_omega_matrix` when the raw values exceed ``clamp_max`` over
    the training collection; ``multiplier`` is a user-chosen constant.
    """

    clamp_max: float = 1.0
    scale: float = 1.0
    multiplier: float = 1.0

    kind: ClassVar[str] = ""

    def _raw(self, rows: Rows) -> np.ndarray:
        raise NotImplementedError

    def values(self, rows: Rows) -> np.ndarray:
        return np.clip(self.unclipped(rows), 0.0, self.clamp_max)

    def unclipped(self, rows: Rows) -> np.ndarray:
        return self._raw(rows) * (self.scale * self.multiplier)

    def _params(self) -> dict:
        raise NotImplementedError

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        d.update(self._params())
        d.update(clamp_max=self.clamp_max, scale=self.scale, multiplier=self.multiplier)
        return d


def _need_labels(rows: Rows, what: str) -> np.ndarray:
    if np.any(rows.labels < 0):
        raise MissingField(f"{what} needs a label on every observation")
    return rows.labels


def _need_embeddings(rows: Rows, what: str, dim: int | None = None) -> np.ndarray:
    if rows.embeddings is None:
        raise MissingField(f"{what} needs embeddings")
    e = rows.embeddings
    if not np.all(np.isfinite(e)):
        raise NonFinite("embedding contains NaN or inf")
    if dim is not None and e.shape[1] != dim:
        raise DataError(f"{what} expects {dim}-dim embeddings, got {e.shape[1]}")
    return e


def _lookup(table: Mapping[int, float], keys: np.ndarray, default: float) -> np.ndarray:
    uniq, inv = np.unique(keys, return_inverse=True)
    vals = np.array([float(table.get(int(u), default)) for u in uniq])
    return vals[inv]


@dataclass(frozen=True)
class Tabular(BiasSpec):
    """Piecewise-constant omega over a discrete key (stratum or label)."""

    table: Mapping[int, float]
    key: str = "stratum"
    default: float = 0.0

    kind: ClassVar[str] = "tabular"

    def __post_init__(self):
        if self.key not in ("stratum", "label"):
            raise ConfigError(f"tabular key must be 'stratum' or 'label', not {self.key!r}")
        object.__setattr__(self, "table", {int(k): float(v) for k, v in dict(self.table).items()})

    def _raw(self, rows):
        if self.key == "label":
            keys = _need_labels(rows, "tabular(label)")
        else:
            if rows.strata is None:
                raise MissingField("tabular(stratum) needs a stratum on every observation")
            keys = rows.strata
        return _lookup(self.table, keys, self.default)

    def _params(self):
        return {"table": {str(k): v for k, v in sorted(self.table.items())}, "key": self.key, "default": self.default}


@dataclass(frozen=True)
class ClassRatio(BiasSpec):
    """omega(x, y) proportional to p_source(y) / p_test(y)."""

    p_source: tuple[float, ...]
    p_test: tuple[float, ...]

    kind: ClassVar[str] = "class_ratio"

    def __post_init__(self):
        ps = tuple(float(v) for v in self.p_source)
        pt = tuple(float(v) for v in self.p_test)
        if len(ps) != len(pt):
            raise ConfigError("p_source and p_test must have the same length")
        if any(a > 0 and b <= 0 for a, b in zip(ps, pt)):
            raise ConfigError("p_test must be positive wherever p_source is")
        object.__setattr__(self, "p_source", ps)
        object.__setattr__(self, "p_test", pt)

    @property
    def ratios(self) -> np.ndarray:
        ps, pt = np.array(self.p_source), np.array(self.p_test)
        out = np.zeros_like(ps)
        np.divide(ps, pt, out=out, where=pt > 0)
        return out

    def _raw(self, rows):
        y = _need_labels(rows, "class_ratio")
        if np.any(y >= len(self.p_source)):
            raise DataError(f"label {int(y.max())} outside the {len(self.p_source)} classes of class_ratio")
        return self.ratios[y]

    def _params(self):
        return {"p_source": list(self.p_source), "p_test": list(self.p_test)}


def _box_arrays(lower, upper):
    lo = tuple(float(v) for v in lower)
    hi = tuple(float(v) for v in upper)
    if len(lo) != len(hi):
        raise ConfigError("box bounds must have equal length")
    if any(a > b for a, b in zip(lo, hi)):
        raise ConfigError("box lower bound exceeds upper bound")
    return lo, hi


@dataclass(frozen=True)
class Box(BiasSpec):
    """Indicator of an axis-aligned box, boundaries included."""

    lower: tuple[float, ...]
    upper: tuple[float, ...]

    kind: ClassVar[str] = "box"

    def __post_init__(self):
        lo, hi = _box_arrays(self.lower, self.upper)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)

    def _raw(self, rows):
        e = _need_embeddings(rows, "box", len(self.lower))
        inside = np.all((e >= np.array(self.lower)) & (e <= np.array(self.upper)), axis=1)
        return inside.astype(float)

    def _params(self):
        return {"lower": list(self.lower), "upper": list(self.upper)}


def l1_distance_to_box(e: np.ndarray, lower, upper) -> np.ndarray:
    """l1 distance from each row of ``e`` to the box (the l1 projection is the coordinatewise clamp)."""
    proj = np.clip(e, np.asarray(lower, dtype=float), np.asarray(upper, dtype=float))
    return np.abs(e - proj).sum(axis=1)


@dataclass(frozen=True)
class BoxRamp(BiasSpec):
    """1 inside the box, decaying linearly with l1 distance over ``width`` outside."""

    lower: tuple[float, ...]
    upper: tuple[float, ...]
    width: float

    kind: ClassVar[str] = "box_ramp"

    def __post_init__(self):
        lo, hi = _box_arrays(self.lower, self.upper)
        object.__setattr__(self, "lower", lo)
        object.__setattr__(self, "upper", hi)
        if not self.width >= 0:
            raise ConfigError("ramp width must be >= 0")

    def _raw(self, rows):
        e = _need_embeddings(rows, "box_ramp", len(self.lower))
        d = l1_distance_to_box(e, self.lower, self.upper)
        if self.width == 0:
            return (d == 0).astype(float)
        return np.where(d == 0, 1.0, np.maximum(0.0, 1.0 - d / self.width))

    def _params(self):
        return {"lower": list(self.lower), "upper": list(self.upper), "width": self.width}


@dataclass(frozen=True)
class SimilarityExp(BiasSpec):
    """exp(-beta * (|e - reference|^2 - |e - target|^2))."""

    reference: tuple[float, ...]
    target: tuple[float, ...]
    beta: float = 0.0

    kind: ClassVar[str] = "similarity_exp"

    def __post_init__(self):
        object.__setattr__(self, "reference", tuple(float(v) for v in self.reference))
        object.__setattr__(self, "target", tuple(float(v) for v in self.target))
        if not self.beta >= 0:
            raise ConfigError("beta must be >= 0")

    def _raw(self, rows):
        e = _need_embeddings(rows, "similarity_exp", len(self.reference))
        d_ref = ((e - np.array(self.reference)) ** 2).sum(axis=1)
        d_tgt = ((e - np.array(self.target)) ** 2).sum(axis=1)
        return np.exp(-self.beta * (d_ref - d_tgt))

    def _params(self):
        return {"reference": list(self.reference), "target": list(self.target), "beta": self.beta}


@dataclass(frozen=True)
class SimilarityRatio(BiasSpec):
    """(s . train_mean + beta) / (s . proportions + beta) for a score vector s."""

    train_mean: tuple[float, ...]
    proportions: tuple[float, ...]
    beta: float = 0.0

    kind: ClassVar[str] = "similarity_ratio"

    def __post_init__(self):
        object.__setattr__(self, "train_mean", tuple(float(v) for v in self.train_mean))
        object.__setattr__(self, "proportions", tuple(float(v) for v in self.proportions))
        if not self.beta >= 0:
            raise ConfigError("beta must be >= 0")

    def _raw(self, rows):
        s = _need_embeddings(rows, "similarity_ratio", len(self.train_mean))
        num = s @ np.array(self.train_mean) + self.beta
        den = s @ np.array(self.proportions) + self.beta
        if np.any(den <= 0):
            raise DataError("similarity_ratio denominator is not positive")
        return num / den

    def _params(self):
        return {"train_mean": list(self.train_mean), "proportions": list(self.proportions), "beta": self.beta}


@dataclass(frozen=True)
class Table(BiasSpec):
    """Explicit omega values keyed by ``(source, id)``."""

    entries: Mapping[tuple[int, int], float]

    kind: ClassVar[str] = "table"

    def __post_init__(self):
        object.__setattr__(
            self, "entries", {(int(s), int(i)): float(v) for (s, i), v in dict(self.entries).items()}
        )

    def _raw(self, rows):
        out = np.empty(len(rows))
        for r, (s, i) in enumerate(zip(rows.sources.tolist(), rows.ids.tolist())):
            try:
                out[r] = self.entries[(s, i)]
            except KeyError:
                raise MissingField(f"table has no value for source {s}, id {i}") from None
        return out

    def _params(self):
        return {"entries": [[s, i, v] for (s, i), v in sorted(self.entries.items())]}


def _content_noise(rows: Rows, seed: int) -> np.ndarray:
    """Deterministic noise in [-1, 1] that depends only on the observation's content."""
    cols = [rows.labels.astype(float)[:, None]]
    cols.append((rows.strata if rows.strata is not None else np.full(len(rows), -1)).astype(float)[:, None])
    if rows.embeddings is not None:
        cols.append(rows.embeddings)
    keys = np.ascontiguousarray(np.hstack(cols))
    uniq, inv = np.unique(keys, axis=0, return_inverse=True)
    salt = int(seed).to_bytes(8, "little", signed=False)
    u = np.empty(len(uniq))
    for j, row in enumerate(uniq):
        h = hashlib.blake2b(row.tobytes(), digest_size=8, key=salt).digest()
        u[j] = int.from_bytes(h, "little") / 2.0**64
    return (2.0 * u - 1.0)[inv.ravel()]


@dataclass(frozen=True)
class Perturbed(BiasSpec):
    """A base spec plus bounded deterministic noise of size at most ``magnitude``."""

    base: BiasSpec
    magnitude: float
    seed: int = 0

    kind: ClassVar[str] = "perturbed"

    def _raw(self, rows):
        v = self.base.values(rows)
        if self.magnitude == 0:
            return v
        return np.maximum(0.0, v + self.magnitude * _content_noise(rows, self.seed))

    def _params(self):
        return {"base": self.base.to_dict(), "magnitude": self.magnitude, "seed": self.seed}


SPEC_KINDS = {
    cls.kind: cls
    for cls in (Tabular, ClassRatio, Box, BoxRamp, SimilarityExp, SimilarityRatio, Table, Perturbed)
}


def spec_from_dict(d: Mapping) -> BiasSpec:
    """Inverse of :meth:`BiasSpec.to_dict`."""
    d = dict(d)
    try:
        cls = SPEC_KINDS[d.pop("kind")]
    except KeyError as exc:
        raise ConfigError(f"unknown or missing bias spec kind: {exc}") from None
    common = {k: float(d.pop(k)) for k in ("clamp_max", "scale", "multiplier") if k in d}
    if cls is Tabular:
        d["table"] = {int(k): v for k, v in d["table"].items()}
    elif cls is Table:
        d["entries"] = {(int(s), int(i)): v for s, i, v in d["entries"]}
    elif cls is Perturbed:
        d["base"] = spec_from_dict(d["base"])
    try:
        return cls(**d, **common)
    except TypeError as exc:
        raise ConfigError(f"bad parameters for {cls.kind}: {exc}") from None


def evaluate_bias(spec: BiasSpec, obs: Observation) -> float:
    """Evaluate a biasing function at one observation."""
    return float(spec.values(Rows.from_observation(obs))[0])


# --------------------------------------------------------------------------
# omega matrix


@dataclass(frozen=True, eq=False)
class OmegaMatrix:
    """``values[r, l] = omega_l(z_r)`` for every training row ``r`` (source-major).

    ``specs`` are the specs actually used, i.e. after the training-set rescale.
    """

    values: np.ndarray
    source: np.ndarray
    obs: np.ndarray
    specs: tuple = field(default=())

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def K(self) -> int:
        return self.values.shape[1]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["source", "obs"] + [f"omega_{l}" for l in range(self.K)])
        for s, i, row in zip(self.source.tolist(), self.obs.tolist(), self.values):
            w.writerow([s, i] + [FLOAT_FMT.format(v) for v in row])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "OmegaMatrix":
        rows = list(csv.reader(io.StringIO(text)))
        header, body = rows[0], rows[1:]
        if header[:2] != ["source", "obs"]:
            raise DataError("omega CSV must start with columns source,obs")
        a = np.array([[float(x) for x in r] for r in body]).reshape(len(body), len(header))
        return cls(values=_frozen(a[:, 2:]), source=_frozen(a[:, 0], np.int64), obs=_frozen(a[:, 1], np.int64))


def build_omega_matrix(specs: Sequence[BiasSpec], data: DatasetCollection, rescale: bool = True) -> OmegaMatrix:
    """Materialize ``omega_l(z_i^(k))`` for all rows and all ``K`` specs.

    When ``rescale`` is on, a spec whose values exceed its ``clamp_max`` on the
    collection is divided by its maximum so that all ratios survive.
    """
    specs = list(specs)
    if len(specs) != data.K:
        raise LengthMismatch(f"{len(specs)} bias specs for {data.K} sources")
    rows = data.rows()
    fitted, cols = [], []
    for spec in specs:
        raw = spec.unclipped(rows)
        if not np.all(np.isfinite(raw)):
            raise NonFinite(f"{spec.kind} produced non-finite values")
        top = float(raw.max())
        if rescale and top > spec.clamp_max:
            spec = replace(spec, scale=spec.scale * spec.clamp_max / top)
        fitted.append(spec)
        cols.append(spec.values(rows))
    values = np.column_stack(cols)
    dead = np.flatnonzero(values.max(axis=1) <= 0)
    if dead.size:
        r = int(dead[0])
        raise UnsupportedObservation(
            f"{dead.size} observation(s) outside every support, first: source {int(data.source[r])}, "
            f"obs {int(data.obs[r])}"
        )
    return OmegaMatrix(values=_frozen(values), source=data.source, obs=data.obs, specs=tuple(fitted))
