"""Debiasing weights and weight-distribution metrics."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .core import FLOAT_FMT, DatasetCollection, OmegaMatrix
from .errors import DataError, LengthMismatch, MissingKey, NonPositiveW
from .seeding import stream


@dataclass(frozen=True, eq=False)
class WeightVector:
    """Normalized weights ``pi`` (sum 1) and the unnormalized ``lambda(k, i)``."""

    pi: np.ndarray
    unnormalized: np.ndarray
    source: np.ndarray | None = None
    obs: np.ndarray | None = None

    def __len__(self):
        return len(self.pi)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["source", "obs", "pi", "unnormalized"])
        n = len(self.pi)
        source = np.zeros(n, dtype=int) if self.source is None else self.source
        obs = np.arange(n) if self.obs is None else self.obs
        for s, i, p, u in zip(source.tolist(), obs.tolist(), self.pi, self.unnormalized):
            w.writerow([s, i, FLOAT_FMT.format(p), FLOAT_FMT.format(u)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "WeightVector":
        rows = list(csv.reader(io.StringIO(text)))
        if rows[0] != ["source", "obs", "pi", "unnormalized"]:
            raise DataError("weights CSV must have header source,obs,pi,unnormalized")
        body = rows[1:]
        return cls(
            pi=np.array([float(r[2]) for r in body]),
            unnormalized=np.array([float(r[3]) for r in body]),
            source=np.array([int(r[0]) for r in body]),
            obs=np.array([int(r[1]) for r in body]),
        )

    @classmethod
    def uniform(cls, n: int) -> "WeightVector":
        return cls(pi=np.full(n, 1.0 / n), unnormalized=np.ones(n))


def compute_pi(omega, lam, W_hat, max_weight: float | None = None) -> WeightVector:
    """``pi`` proportional to ``1 / sum_l lambda_l omega_l(z) / W_l``.

    ``max_weight`` optionally caps the normalized weights (then renormalizes
    once); it is off by default.
    """
    vals = omega.values if isinstance(omega, OmegaMatrix) else np.asarray(omega, dtype=float)
    lam = np.asarray(lam, dtype=float)
    W = np.asarray(W_hat, dtype=float)
    if W.shape != lam.shape or vals.shape[1] != len(W):
        raise LengthMismatch("omega, lambda and W must agree on K")
    if np.any(~(W > 0)):
        raise NonPositiveW(f"normalizer estimates must be positive, got {W.tolist()}")
    denom = vals @ (lam / W)
    if np.any(denom <= 0):
        raise DataError("a row has no positive omega")
    unnorm = 1.0 / denom
    pi = unnorm / unnorm.sum()
    if max_weight is not None:
        pi = np.minimum(pi, max_weight)
        pi = pi / pi.sum()
    source = omega.source if isinstance(omega, OmegaMatrix) else None
    obs = omega.obs if isinstance(omega, OmegaMatrix) else None
    return WeightVector(pi=pi, unnormalized=unnorm, source=source, obs=obs)


@dataclass(frozen=True)
class DebiasedDistribution:
    support: tuple[int, ...]
    mass: tuple[float, ...]

    def as_dict(self) -> dict[int, float]:
        return dict(zip(self.support, self.mass))

    def dense(self, size: int) -> np.ndarray:
        out = np.zeros(size)
        for v, m in zip(self.support, self.mass):
            out[v] = m
        return out


def debiased_distribution(pi: WeightVector, data: DatasetCollection, key: str = "label") -> DebiasedDistribution:
    """Mass of each distinct label (or stratum) under the weights ``pi``."""
    if len(pi) != data.n:
        raise LengthMismatch(f"{len(pi)} weights for {data.n} observations")
    if key == "label":
        values = data.labels
        if np.any(values < 0):
            raise MissingKey("some observations have no label")
    elif key == "stratum":
        if data.strata is None:
            raise MissingKey("observations have no stratum")
        values = data.strata
    else:
        raise MissingKey(f"unknown key {key!r}")
    support, inv = np.unique(values, return_inverse=True)
    mass = np.bincount(inv.ravel(), weights=pi.pi, minlength=len(support))
    return DebiasedDistribution(tuple(int(v) for v in support), tuple(float(m) for m in mass))


def total_variation(p, q) -> float:
    return 0.5 * float(np.abs(np.asarray(p, dtype=float) - np.asarray(q, dtype=float)).sum())


def gini(pi) -> float:
    """Gini index of a weight vector, via the sorted-weights identity.

    ``sum_{i,j} |x_i - x_j| / (2 n sum x) = sum_i (2i - n - 1) x_(i) / (n sum x)``
    with ``x_(i)`` sorted ascending and ``i`` starting at 1.
    """
    x = np.sort(np.asarray(getattr(pi, "pi", pi), dtype=float))
    n = len(x)
    if n == 0:
        raise LengthMismatch("gini of an empty vector")
    if x[0] == x[-1]:
        return 0.0
    coef = 2.0 * np.arange(1, n + 1) - n - 1
    return float(coef @ x / (n * x.sum()))


def gini_naive(x) -> float:
    """Quadratic double sum, kept as an independent reference."""
    x = np.asarray(getattr(x, "pi", x), dtype=float)
    return float(np.abs(x[:, None] - x[None, :]).sum() / (2 * len(x) * x.sum()))


def l2_to_reference(pi, reference) -> float:
    a = np.asarray(getattr(pi, "pi", pi), dtype=float)
    b = np.asarray(getattr(reference, "pi", reference), dtype=float)
    if a.shape != b.shape:
        raise LengthMismatch(f"lengths differ: {a.shape} vs {b.shape}")
    return float(np.linalg.norm(a - b))


def resample(pi: WeightVector, size: int, seed: int) -> np.ndarray:
    """Row indices drawn with replacement with probabilities ``pi``."""
    return stream(seed, 0).choice(len(pi), size=size, p=pi.pi)
