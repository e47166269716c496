"""Biasing functions estimated from the biased samples alone."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import BiasSpec, Box, DatasetCollection, Perturbed, Tabular
from .errors import ConfigError, MissingEmbedding, UnlabeledObservation
from .seeding import derive_seed


def estimate_class_counts(
    data: DatasetCollection, smoothing: float = 0.0, multipliers=None
) -> list[Tabular]:
    """One label-keyed table per source, proportional to its class counts.

    Values are divided by the source's largest count so they lie in [0, 1].
    ``smoothing`` adds a constant to every class count before that division
    (0 reproduces raw counts).  ``multipliers`` attaches a per-source constant.
    """
    if np.any(data.labels < 0):
        raise UnlabeledObservation("class-count estimation needs every observation labeled")
    if smoothing < 0:
        raise ConfigError("smoothing must be >= 0")
    M = max(data.M, int(data.labels.max()) + 1)
    specs = []
    for k in range(data.K):
        counts = np.bincount(data.labels[data.source == k], minlength=M).astype(float) + smoothing
        table = {y: c / counts.max() for y, c in enumerate(counts)}
        mult = 1.0 if multipliers is None else float(multipliers[k])
        specs.append(Tabular(table, key="label", multiplier=mult))
    return specs


def estimate_boxes(data: DatasetCollection, margin: float = 0.0) -> list[Box]:
    """Bounding box of each source's embeddings, as an indicator.

    ``margin`` widens every side of the box (0 keeps the plain min/max box).
    """
    if data.embeddings is None:
        raise MissingEmbedding("box estimation needs embeddings")
    specs = []
    for k in range(data.K):
        e = data.embeddings[data.source == k]
        specs.append(Box(tuple(e.min(axis=0) - margin), tuple(e.max(axis=0) + margin)))
    return specs


def perturb_spec(spec: BiasSpec, magnitude: float, seed: int) -> Perturbed:
    """Add deterministic noise of size at most ``magnitude``, clipped to [0, clamp_max]."""
    if magnitude < 0:
        raise ConfigError("magnitude must be >= 0")
    return Perturbed(spec, float(magnitude), int(seed) % 2**64, clamp_max=spec.clamp_max)


def perturb_specs(specs, magnitude: float, seed: int) -> list[Perturbed]:
    return [perturb_spec(s, magnitude, derive_seed(seed, k)) for k, s in enumerate(specs)]


@dataclass(frozen=True)
class ApproxQuality:
    sup_error: float
    C_omega_hat: float

    def to_dict(self) -> dict:
        return {"sup_error": self.sup_error, "C_omega_hat": self.C_omega_hat}


def approx_quality(estimated, truth, data: DatasetCollection) -> ApproxQuality:
    """Largest deviation between estimated and true omega over the training rows.

    Both sets of specs are put on the same footing first: each column is
    divided by its maximum over the collection, since omega only matters up
    to a constant factor.
    """
    rows = data.rows()
    sup = 0.0
    for est, tru in zip(estimated, truth):
        a = est.unclipped(rows)
        b = tru.unclipped(rows)
        a = a / a.max() if a.max() > 0 else a
        b = b / b.max() if b.max() > 0 else b
        sup = max(sup, float(np.abs(a - b).max()))
    return ApproxQuality(sup, sup * math.sqrt(data.n))
