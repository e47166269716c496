"""Exact computations on small discrete spaces.

A :class:`DiscreteProblem` fixes a finite support with its target masses and
biasing functions.  Every population quantity then has a closed form against
which the sample machinery can be checked.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .core import FLOAT_FMT, build_omega_matrix
from .errors import ConfigError, NotConnected, UnsupportedShapes, ZeroNormalizer
from .generators import TwoPointConfig, gen_two_point
from .seeding import derive_seed, stream
from .solver import SolverConfig, solve, strongly_connected_components
from .weights import compute_pi, gini


@dataclass(frozen=True, eq=False)
class DiscreteProblem:
    points: tuple
    p_test: np.ndarray
    omega: np.ndarray  # (|Z|, K)
    lam: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.p_test, dtype=float)
        w = np.atleast_2d(np.asarray(self.omega, dtype=float))
        lam = np.asarray(self.lam, dtype=float)
        if w.shape != (len(p), len(lam)):
            raise ConfigError(f"omega has shape {w.shape}, expected {(len(p), len(lam))}")
        if abs(p.sum() - 1) > 1e-12 or p.min() < 0:
            raise ConfigError("p_test must be a probability vector")
        if np.any((p > 0) & (w.max(axis=1) <= 0)):
            raise ConfigError("some point with positive test mass is outside every support")
        object.__setattr__(self, "p_test", p)
        object.__setattr__(self, "omega", w)
        object.__setattr__(self, "lam", lam)

    @property
    def K(self) -> int:
        return len(self.lam)

    def graph(self) -> np.ndarray:
        """``adj[k, l]``: source ``l`` puts mass where ``omega_k > 0``."""
        on = self.omega > 0
        mass_l = (self.omega * self.p_test[:, None]) > 0
        return (on.T.astype(int) @ mass_l.astype(int)) > 0


def exact_omegas(prob: DiscreteProblem) -> np.ndarray:
    """``Omega_k = sum_z omega_k(z) p_test(z)``."""
    return prob.omega.T @ prob.p_test


def exact_pbar(prob: DiscreteProblem) -> np.ndarray:
    """``p_bar(z) = sum_k lambda_k omega_k(z) p_test(z) / Omega_k``."""
    Om = exact_omegas(prob)
    if np.any(Om <= 0):
        raise ZeroNormalizer(f"normalizers must be positive, got {Om.tolist()}")
    return prob.p_test * (prob.omega @ (prob.lam / Om))


def exact_solve(prob: DiscreteProblem, cfg: SolverConfig | None = None) -> np.ndarray:
    """Solve the population system with rows weighted by ``p_bar``; returns W with ``W_K = 1``."""
    comps = strongly_connected_components(prob.graph())
    if len(comps) > 1:
        raise NotConnected(f"overlap graph has components {comps}", comps)
    pbar = exact_pbar(prob)
    keep = pbar > 0
    cfg = cfg or SolverConfig.full(grad_tol=1e-12, max_iters=500_000)
    res = solve(prob.omega[keep], prob.lam, cfg, row_weights=pbar[keep])
    return res.W_hat


def exact_debiased(prob: DiscreteProblem, W) -> np.ndarray:
    """Debiased masses over the points, built from ``p_bar`` and normalizers ``W``."""
    pbar = exact_pbar(prob)
    denom = prob.omega @ (prob.lam / np.asarray(W, dtype=float))
    out = np.zeros_like(pbar)
    np.divide(pbar, denom, out=out, where=pbar > 0)
    return out / out.sum()


def random_problem(rng: np.random.Generator, max_points: int = 8, max_K: int = 4, max_tries: int = 1000):
    """A random connected problem, by rejection; returns ``(problem, rejections)``."""
    for tries in range(max_tries):
        Z = int(rng.integers(2, max_points + 1))
        K = int(rng.integers(1, max_K + 1))
        p = rng.dirichlet(np.ones(Z))
        w = rng.uniform(0.05, 1.0, size=(Z, K)) * (rng.random((Z, K)) > 0.3)
        lam = rng.dirichlet(np.ones(K))
        if np.any(w.max(axis=1) <= 0) or np.any(w.sum(axis=0) <= 0):
            continue
        prob = DiscreteProblem(tuple(range(Z)), p, w, lam)
        if len(strongly_connected_components(prob.graph())) == 1:
            return prob, tries
    raise RuntimeError("could not draw a connected problem")


# --------------------------------------------------------------------------
# two-point study


@dataclass(frozen=True)
class StudyCell:
    R1: float
    R2: float
    gini_mean: float
    gini_2sd: float
    absdiff_mean: float
    absdiff_2sd: float
    true_gini_mean: float


def _two_point_trial(R1, R2, n1, n2, seed, solver_cfg):
    data, specs = gen_two_point(TwoPointConfig(R=(R1, R2), n=(n1, n2), seed=seed))
    om = build_omega_matrix(specs, data)
    res = solve(om, data.lam, solver_cfg)
    g_hat = gini(compute_pi(om, data.lam, res.W_hat))
    # true normalizers of the (rescaled) specs under the uniform test law on {1, 2}
    Om = np.array([(s.table[1] + s.table[2]) / 2 for s in om.specs])
    g_true = gini(compute_pi(om, data.lam, Om))
    return g_hat, g_true


def run_two_point_study(
    R_grid=(1e-2, 1e-1, 1.0, 10.0, 1e2),
    n_1: int = 100,
    n_2: int = 100,
    trials: int = 100,
    seed: int = 0,
    solver_cfg: SolverConfig | None = None,
    threads: int = 1,
) -> list[StudyCell]:
    """Gini index of the estimated weights over a grid of ``(R_1, R_2)``.

    For each cell, ``trials`` datasets are drawn; the Gini index of the
    weights built from the estimated normalizers is compared to the one built
    from the exact normalizers.  Spreads are reported as twice the standard
    deviation.
    """
    if trials < 1:
        raise ConfigError("trials must be >= 1")
    solver_cfg = solver_cfg or SolverConfig.full(max_iters=20_000)
    R_grid = [float(r) for r in R_grid]
    jobs = [
        (R1, R2, n_1, n_2, derive_seed(seed, i, j, t), solver_cfg)
        for i, R1 in enumerate(R_grid)
        for j, R2 in enumerate(R_grid)
        for t in range(trials)
    ]
    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            results = list(ex.map(lambda a: _two_point_trial(*a), jobs))
    else:
        results = [_two_point_trial(*a) for a in jobs]

    cells = []
    for c in range(len(R_grid) ** 2):
        block = np.array(results[c * trials : (c + 1) * trials])
        g, gt = block[:, 0], block[:, 1]
        diff = np.abs(g - gt)
        sd = lambda x: float(np.std(x, ddof=1)) if len(x) > 1 else 0.0  # noqa: E731
        R1, R2 = jobs[c * trials][:2]
        cells.append(StudyCell(R1, R2, float(g.mean()), 2 * sd(g), float(diff.mean()), 2 * sd(diff), float(gt.mean())))
    return cells


def study_csv(cells) -> str:
    """One row per cell; Gini columns are in units of 1e-2."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(
        ["R1", "R2", "gini_mean_x1e-2", "gini_2sd_x1e-2", "absdiff_mean_x1e-2", "absdiff_2sd_x1e-2", "true_gini_x1e-2"]
    )
    for c in cells:
        vals = [c.gini_mean, c.gini_2sd, c.absdiff_mean, c.absdiff_2sd, c.true_gini_mean]
        w.writerow([FLOAT_FMT.format(c.R1), FLOAT_FMT.format(c.R2)] + [FLOAT_FMT.format(100 * v) for v in vals])
    return buf.getvalue()


# --------------------------------------------------------------------------
# threshold classifier on [0, 1]


def threshold_risk(theta, alpha: float, beta: float, p: float):
    """``R_p(theta) = p theta^(1+alpha) + (1-p) (1-theta)^(1+beta)``."""
    theta = np.asarray(theta, dtype=float)
    return p * theta ** (1 + alpha) + (1 - p) * (1 - theta) ** (1 + beta)


def stationarity_residual(theta, alpha, beta, p) -> float:
    return p * (1 + alpha) * theta**alpha - (1 - p) * (1 + beta) * (1 - theta) ** beta


def closed_form_threshold(alpha: float, beta: float, p: float) -> float:
    """Tabulated optimal thresholds; other shapes raise UnsupportedShapes.

    For ``alpha = beta = 0`` the risk is linear in ``theta``, so the optimum is
    an endpoint (any point of [0, 1] when ``p = 1/2``, reported as 0.5).
    """
    q = 1 - p
    if alpha == beta == 0:
        return 0.0 if p > 0.5 else 1.0 if p < 0.5 else 0.5
    if alpha == beta == 0.5:
        return q**2 / (p**2 + q**2)
    if alpha == beta == 1:
        return q
    if alpha == beta == 2:
        return math.sqrt(q) / (math.sqrt(p) + math.sqrt(q))
    raise UnsupportedShapes(f"no closed form for (alpha, beta) = ({alpha}, {beta})")


def bisect_threshold(alpha: float, beta: float, p: float, tol: float = 1e-15) -> float:
    """Root of the stationarity equation by bisection (the risk is convex)."""
    if alpha == beta == 0:
        raise UnsupportedShapes("the risk is linear for alpha = beta = 0; no stationary point")
    lo, hi = 0.0, 1.0
    if stationarity_residual(lo, alpha, beta, p) >= 0:
        return lo
    if stationarity_residual(hi, alpha, beta, p) <= 0:
        return hi
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if stationarity_residual(mid, alpha, beta, p) < 0:
            lo = mid
        else:
            hi = mid
        if hi - lo < tol:
            break
    return 0.5 * (lo + hi)


@dataclass(frozen=True)
class ThresholdDemo:
    alpha: float
    beta: float
    p: float
    theta_star: float
    method: str

    def risk(self, theta, p=None):
        return threshold_risk(theta, self.alpha, self.beta, self.p if p is None else p)

    def optimal(self, p: float) -> float:
        return optimal_threshold(self.alpha, self.beta, p)

    def excess(self, p_prime: float, p: float | None = None) -> float:
        """Excess risk under ``p`` of the threshold that is optimal for ``p_prime``."""
        p = self.p if p is None else p
        return float(self.risk(self.optimal(p_prime), p) - self.risk(self.optimal(p), p))


def optimal_threshold(alpha, beta, p) -> float:
    try:
        return closed_form_threshold(alpha, beta, p)
    except UnsupportedShapes:
        return bisect_threshold(alpha, beta, p)


def threshold_demo(alpha: float, beta: float, p: float) -> ThresholdDemo:
    if alpha < 0 or beta < 0:
        raise ConfigError("alpha and beta must be >= 0")
    if not 0 < p < 1:
        raise ConfigError("p must lie in (0, 1)")
    try:
        theta, method = closed_form_threshold(alpha, beta, p), "closed_form"
    except UnsupportedShapes:
        theta, method = bisect_threshold(alpha, beta, p), "bisection"
    return ThresholdDemo(alpha, beta, p, theta, method)


def random_problems(n: int, seed: int, **kw):
    rng = stream(seed, 0)
    out, rejected = [], 0
    for _ in range(n):
        prob, r = random_problem(rng, **kw)
        out.append(prob)
        rejected += r
    return out, rejected
