"""Synthetic biased multi-source datasets with known biasing functions.

Four scenarios are provided:

* class imbalance -- source ``k`` only sees the classes of two consecutive
  meta-classes, with overlap ``gamma``;
* HSV acquisition bins -- sources are defined by median splits of a
  3-dimensional embedding, with linear ramps around each bin;
* power law -- one training set whose modality proportions follow a
  permuted power law, drawn without replacement;
* two-point -- ``Z = {1, 2}`` with ``omega_k(1) = R_k`` and ``omega_k(2) = 1``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .core import (
    BoxRamp,
    ClassRatio,
    DatasetCollection,
    Observation,
    Rows,
    SourceDataset,
    Tabular,
)
from .errors import (
    ConfigError,
    DegeneratePopulation,
    EmptyClassPool,
    EmptyModalityPool,
    MissingEmbedding,
)
from .seeding import stream


def _as_block(obs) -> SourceDataset:
    if isinstance(obs, SourceDataset):
        return obs
    return SourceDataset.from_observations(0, list(obs))


def _take(block: SourceDataset, idx: np.ndarray, index: int, strata=None) -> SourceDataset:
    pick = lambda a: None if a is None else a[idx]  # noqa: E731
    return SourceDataset(
        index=index,
        ids=block.ids[idx],
        labels=block.labels[idx],
        strata=pick(block.strata) if strata is None else strata,
        embeddings=pick(block.embeddings),
        features=pick(block.features),
    )


def largest_remainder(weights, total: int) -> np.ndarray:
    """Integer counts proportional to ``weights`` that sum exactly to ``total``."""
    w = np.asarray(weights, dtype=float)
    exact = total * w / w.sum()
    counts = np.floor(exact).astype(np.int64)
    short = total - int(counts.sum())
    # ties go to the lower index
    order = np.lexsort((np.arange(len(w)), -(exact - counts)))
    counts[order[:short]] += 1
    return counts


def balanced_sizes(n_total: int, K: int) -> np.ndarray:
    return largest_remainder(np.ones(K), n_total)


def long_tail_sizes(n_total: int, K: int, alpha: float) -> np.ndarray:
    """Sizes ``n_k`` proportional to ``alpha**k``, rounded to hit ``n_total``."""
    if not 0 < alpha <= 1:
        raise ConfigError("alpha must lie in (0, 1]")
    return largest_remainder(alpha ** np.arange(K), n_total)


# --------------------------------------------------------------------------
# class imbalance


@dataclass(frozen=True)
class ClassImbalanceConfig:
    M: int = 10
    K: int = 5
    gamma: float = 0.2
    n_k: tuple[int, ...] = (1000,) * 5
    seed: int = 0
    class_permutation: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.K < 1 or self.M % self.K:
            raise ConfigError(f"K={self.K} must divide M={self.M}")
        if not 0 <= self.gamma <= 0.5:
            raise ConfigError("gamma must lie in [0, 0.5]")
        n_k = (self.n_k,) * self.K if np.isscalar(self.n_k) else tuple(self.n_k)
        if len(n_k) != self.K or min(n_k) < 1:
            raise ConfigError("n_k needs K positive counts")
        object.__setattr__(self, "n_k", tuple(int(v) for v in n_k))
        if self.class_permutation is not None:
            perm = tuple(int(v) for v in self.class_permutation)
            if sorted(perm) != list(range(self.M)):
                raise ConfigError("class_permutation must be a permutation of 0..M-1")
            object.__setattr__(self, "class_permutation", perm)


def meta_classes(M: int, K: int, permutation=None) -> list[np.ndarray]:
    """Consecutive blocks of ``M // K`` classes, optionally after relabeling."""
    classes = np.arange(M) if permutation is None else np.asarray(permutation)
    return [classes[k * (M // K) : (k + 1) * (M // K)] for k in range(K)]


def class_imbalance_proportions(M: int, K: int, gamma: float, permutation=None) -> np.ndarray:
    """``(K, M)`` array of per-source class proportions ``p_k(y)``."""
    blocks = meta_classes(M, K, permutation)
    n_c = M // K
    p = np.zeros((K, M))
    for k in range(K):
        p[k, blocks[(k + 1) % K]] += gamma / n_c
        p[k, blocks[k]] += (1 - gamma) / n_c
    return p


def gen_class_imbalance(cfg: ClassImbalanceConfig, pool: Mapping | None = None):
    """Sample ``K`` sources with meta-class imbalance.

    Parameters
    ----------
    cfg : ClassImbalanceConfig
    pool : mapping class -> observations, optional
        Observations to resample (with replacement) for each class.  Without a
        pool, observations carry their label only and ``id == label``.

    Returns
    -------
    data : DatasetCollection
    specs : list of ClassRatio
        Ground-truth biasing functions against the uniform test distribution.
    """
    p = class_imbalance_proportions(cfg.M, cfg.K, cfg.gamma, cfg.class_permutation)
    blocks = None
    if pool is not None:
        blocks = {}
        for y in range(cfg.M):
            if not np.any(p[:, y] > 0):
                continue
            obs = pool.get(y, ())
            if len(obs) == 0:
                raise EmptyClassPool(f"no observations for class {y}")
            blocks[y] = _as_block(obs)

    sources = []
    for k in range(cfg.K):
        rng = stream(cfg.seed, k)
        labels = rng.choice(cfg.M, size=cfg.n_k[k], p=p[k])
        if blocks is None:
            sources.append(SourceDataset(index=k, ids=labels, labels=labels))
            continue
        draws = rng.random(cfg.n_k[k])
        parts = {}
        for y in np.unique(labels):
            block = blocks[int(y)]
            m = labels == y
            parts[int(y)] = (np.flatnonzero(m), np.minimum((draws[m] * block.n).astype(np.int64), block.n - 1))
        src = _gather(parts, blocks, cfg.n_k[k], k)
        sources.append(src)

    p_test = tuple([1.0 / cfg.M] * cfg.M)
    specs = [ClassRatio(tuple(p[k]), p_test) for k in range(cfg.K)]
    return DatasetCollection(sources, M=cfg.M), specs


def _gather(parts, blocks, n, index) -> SourceDataset:
    # reassemble per-class picks in draw order
    first = blocks[next(iter(parts))]
    ids = np.empty(n, dtype=np.int64)
    labels = np.empty(n, dtype=np.int64)
    strata = None if first.strata is None else np.empty(n, dtype=np.int64)
    emb = None if first.embeddings is None else np.empty((n, first.embeddings.shape[1]))
    feat = None if first.features is None else np.empty((n, first.features.shape[1]))
    for y, (pos, idx) in parts.items():
        b = blocks[y]
        ids[pos], labels[pos] = b.ids[idx], b.labels[idx]
        if strata is not None:
            strata[pos] = b.strata[idx]
        if emb is not None:
            emb[pos] = b.embeddings[idx]
        if feat is not None:
            feat[pos] = b.features[idx]
    return SourceDataset(index=index, ids=ids, labels=labels, strata=strata, embeddings=emb, features=feat)


# --------------------------------------------------------------------------
# HSV acquisition bins


@dataclass(frozen=True)
class Bin:
    index: int
    lower: tuple[float, float, float]
    upper: tuple[float, float, float]

    @property
    def code(self) -> tuple[int, int, int]:
        """``(b_H, b_S, b_V)`` with ``index = 4 b_H + 2 b_S + b_V``."""
        return ((self.index >> 2) & 1, (self.index >> 1) & 1, self.index & 1)


def lower_median(x: np.ndarray) -> np.ndarray:
    s = np.sort(np.asarray(x, dtype=float), axis=0)
    return s[(len(s) - 1) // 2]


def hsv_bins(medians) -> list[Bin]:
    """The 8 bins cut out of ``[0, 1]^3`` by the coordinate medians."""
    h = [float(v) for v in medians]
    bins = []
    for l in range(8):
        bits = ((l >> 2) & 1, (l >> 1) & 1, l & 1)
        lower = tuple(h[c] if b else 0.0 for c, b in enumerate(bits))
        upper = tuple(1.0 if b else h[c] for c, b in enumerate(bits))
        bins.append(Bin(l, lower, upper))
    return bins


@dataclass(frozen=True, eq=False)
class HsvBinConfig:
    """``n_k`` overrides ``n_total``/``alpha``; ``alpha=None`` means balanced sizes."""

    population: object
    gamma_ramp: float = 0.1
    n_total: int = 50_000
    alpha: float | None = None
    n_k: tuple[int, ...] | None = None
    seed: int = 0

    def __post_init__(self):
        if not self.gamma_ramp > 0:
            raise ConfigError("gamma_ramp must be > 0")
        if self.alpha is not None and not 0 < self.alpha <= 1:
            raise ConfigError("alpha must lie in (0, 1]")

    def sizes(self) -> np.ndarray:
        if self.n_k is not None:
            n_k = np.asarray(self.n_k, dtype=np.int64)
            if len(n_k) != 8 or n_k.min() < 1:
                raise ConfigError("hsv_bins needs 8 positive source sizes")
            return n_k
        if self.alpha is None:
            return balanced_sizes(self.n_total, 8)
        return long_tail_sizes(self.n_total, 8, self.alpha)


def gen_hsv_bins(cfg: HsvBinConfig):
    """Sample 8 sources from a population using ramped median bins.

    Returns
    -------
    data : DatasetCollection
    specs : list of BoxRamp
        Ground truth, one per bin, with ramp width ``cfg.gamma_ramp``.
    bins : list of Bin
    """
    pop = _as_block(cfg.population)
    if pop.embeddings is None or pop.embeddings.shape[1] != 3:
        raise MissingEmbedding("hsv_bins needs 3-dim embeddings on the population")
    if pop.n < 8:
        raise DegeneratePopulation("hsv_bins needs at least 8 population points")
    e = pop.embeddings
    flat = np.flatnonzero(e.min(axis=0) == e.max(axis=0))
    if flat.size:
        raise DegeneratePopulation(f"embedding coordinate(s) {flat.tolist()} are constant")
    bins = hsv_bins(lower_median(e))
    specs = [BoxRamp(b.lower, b.upper, cfg.gamma_ramp) for b in bins]
    rows = _rows_of(pop)
    sizes = cfg.sizes()
    sources = []
    for k, spec in enumerate(specs):
        w = spec.values(rows)
        rng = stream(cfg.seed, k)
        idx = rng.choice(pop.n, size=int(sizes[k]), p=w / w.sum())
        sources.append(_take(pop, idx, k))
    return DatasetCollection(sources), specs, bins


def _rows_of(block: SourceDataset) -> Rows:
    return Rows(
        ids=block.ids,
        sources=np.zeros(block.n, dtype=np.int64),
        labels=block.labels,
        strata=block.strata,
        embeddings=block.embeddings,
    )


# --------------------------------------------------------------------------
# power law


@dataclass(frozen=True)
class PowerLawConfig:
    """``permutation`` holds sigma(1..K) as values in ``1..K``; drawn from ``seed`` when omitted."""

    p: tuple[float, ...]
    gamma: float = 0.5
    seed: int = 0
    permutation: tuple[int, ...] | None = None

    def __post_init__(self):
        p = tuple(float(v) for v in self.p)
        if not 0 < self.gamma <= 1:
            raise ConfigError("gamma must lie in (0, 1]")
        if abs(sum(p) - 1) > 1e-9 or min(p) < 0:
            raise ConfigError("p must be a probability vector")
        object.__setattr__(self, "p", p)
        if self.permutation is not None:
            perm = tuple(int(v) for v in self.permutation)
            if sorted(perm) != list(range(1, len(p) + 1)):
                raise ConfigError("permutation must contain 1..K")
            object.__setattr__(self, "permutation", perm)

    @property
    def K(self) -> int:
        return len(self.p)

    def sigma(self) -> np.ndarray:
        if self.permutation is not None:
            return np.array(self.permutation)
        return stream(self.seed, 0).permutation(self.K) + 1


def power_law_proportions(p, gamma: float, sigma) -> np.ndarray:
    """``p'_k`` proportional to ``gamma ** (-floor(K/2) / sigma(k)) * p_k``."""
    p = np.asarray(p, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    w = gamma ** (-(len(p) // 2) / sigma) * p
    return w / w.sum()


def gen_power_law(cfg: PowerLawConfig, pool: Mapping) -> DatasetCollection:
    """Draw a single training set, without replacement, in multinomial rounds.

    ``pool`` maps each modality (sorted keys give modality order) to its
    candidate observations.  Rounds continue until some modality runs out.
    The result is a one-source collection whose ``strata`` hold the modality.
    """
    keys = sorted(pool)
    if len(keys) != cfg.K:
        raise ConfigError(f"{len(keys)} modality pools for {cfg.K} proportions")
    blocks = []
    for key in keys:
        if len(pool[key]) == 0:
            raise EmptyModalityPool(f"modality {key} has no observations")
        blocks.append(_as_block(pool[key]))
    target = power_law_proportions(cfg.p, cfg.gamma, cfg.sigma())

    rng = stream(cfg.seed, 1)
    remaining = [rng.permutation(b.n) for b in blocks]  # random order == RandSet draws
    taken = [0] * cfg.K
    m = min(b.n for b in blocks)
    while m > 0:
        counts = rng.multinomial(m, target)
        for k in range(cfg.K):
            taken[k] += int(counts[k])
        m = min(b.n - t for b, t in zip(blocks, taken))

    parts = []
    for k, (b, t) in enumerate(zip(blocks, taken)):
        idx = np.sort(remaining[k][:t])
        parts.append(_take(b, idx, 0, strata=np.full(t, keys[k], dtype=np.int64)))
    return DatasetCollection([_concat(parts)])


def _concat(parts: Sequence[SourceDataset]) -> SourceDataset:
    parts = [p for p in parts if p.n > 0]
    cat = lambda name: None if getattr(parts[0], name) is None else np.concatenate([getattr(p, name) for p in parts])  # noqa: E731
    return SourceDataset(
        index=0,
        ids=cat("ids"),
        labels=cat("labels"),
        strata=cat("strata"),
        embeddings=cat("embeddings"),
        features=cat("features"),
    )


# --------------------------------------------------------------------------
# two-point model


@dataclass(frozen=True)
class TwoPointConfig:
    R: tuple[float, ...] = (1.0, 10.0)
    n: tuple[int, ...] = (100, 100)
    seed: int = 0

    def __post_init__(self):
        R = tuple(float(v) for v in self.R)
        n = tuple(int(v) for v in self.n)
        if len(R) != len(n) or not R:
            raise ConfigError("R and n need one entry per source")
        if min(R) <= 0:
            raise ConfigError("R_k must be positive")
        if min(n) < 1:
            raise ConfigError("n_k must be positive")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "n", n)


def two_point_spec(R: float) -> Tabular:
    """``omega(1) = R``, ``omega(2) = 1``, divided by ``max(R, 1)`` to stay within [0, 1]."""
    top = max(R, 1.0)
    return Tabular({1: R / top, 2: 1.0 / top}, key="stratum")


def gen_two_point(cfg: TwoPointConfig):
    """Sources over ``Z = {1, 2}`` with ``p_k(1) = R_k / (1 + R_k)``.

    Observations carry ``stratum = id = z`` and ``label = z - 1``.
    """
    sources = []
    for k, (R, n) in enumerate(zip(cfg.R, cfg.n)):
        rng = stream(cfg.seed, k)
        z = np.where(rng.random(n) < R / (1.0 + R), 1, 2)
        sources.append(SourceDataset(index=k, ids=z, labels=z - 1, strata=z))
    return DatasetCollection(sources, M=2), [two_point_spec(R) for R in cfg.R]


def label_pool(M: int, per_class: int = 1) -> dict[int, list[Observation]]:
    """A trivial pool: ``per_class`` label-only observations for each class."""
    return {y: [Observation(id=y * per_class + j, label=y) for j in range(per_class)] for y in range(M)}
