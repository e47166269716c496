"""Normalizer estimation for biased sampling models.

With ``u_k = log(lambda_k / W_k)`` the normalizer estimates are the minimizer of

    D(u) = sum_r w_r log(sum_l exp(u_l) omega_l(z_r)) - sum_l lambda_l u_l

where the row weights ``w_r`` are ``1/n`` for a sample and the exact masses of
``p_bar`` for a population.  ``D`` is convex and invariant to ``u -> u + c 1``.
Its gradient is the empirical form of the system ``Gamma_k(W) = 1``.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .core import FLOAT_FMT, OmegaMatrix
from .errors import AllZeroRow, ConfigError, Diverged, LengthMismatch
from .seeding import stream

log = logging.getLogger(__name__)

TINY = 1e-300


def _values(omega) -> np.ndarray:
    if isinstance(omega, OmegaMatrix):
        return omega.values
    return np.asarray(omega, dtype=float)


class _Rows:
    """log(omega) and row weights, precomputed once per solve."""

    def __init__(self, omega, lam, row_weights=None):
        vals = _values(omega)
        if vals.ndim != 2:
            raise LengthMismatch("omega must be a 2-d array")
        self.n, self.K = vals.shape
        self.lam = np.asarray(lam, dtype=float)
        if self.lam.shape != (self.K,):
            raise LengthMismatch(f"lambda has {self.lam.size} entries for {self.K} columns")
        bad = vals.max(axis=1) < TINY
        if bad.any():
            raise AllZeroRow(f"row {int(np.flatnonzero(bad)[0])} of omega has no positive entry")
        with np.errstate(divide="ignore"):
            self.logw = np.log(vals)
        if row_weights is None:
            self.w = None
        else:
            self.w = np.asarray(row_weights, dtype=float)
            if self.w.shape != (self.n,):
                raise LengthMismatch("row_weights must have one entry per row")

    def terms(self, u, rows=None):
        """Per-row log-sum-exp and softmax, stabilized by the row max."""
        logw = self.logw if rows is None else self.logw[rows]
        a = logw + u
        m = a.max(axis=1)
        e = np.exp(a - m[:, None])
        s = e.sum(axis=1)
        return m + np.log(s), e / s[:, None]

    def average(self, x):
        # x is per-row (n,) or (n, K)
        if self.w is None:
            return x.mean(axis=0)
        return self.w @ x

    def value_and_grad(self, u):
        lse, soft = self.terms(u)
        return float(self.average(lse) - self.lam @ u), self.average(soft) - self.lam


def objective(omega, lam, u, row_weights=None) -> float:
    """``D(u)``; rows default to equal weight ``1/n``."""
    p = _Rows(omega, lam, row_weights)
    lse, _ = p.terms(np.asarray(u, dtype=float))
    return float(p.average(lse) - p.lam @ np.asarray(u, dtype=float))


def gradient(omega, lam, u, row_weights=None) -> np.ndarray:
    """Component ``k``: average softmax weight of column ``k`` minus ``lambda_k``."""
    p = _Rows(omega, lam, row_weights)
    _, soft = p.terms(np.asarray(u, dtype=float))
    return p.average(soft) - p.lam


def hessian(omega, lam, u, row_weights=None) -> np.ndarray:
    """Average of ``diag(s) - s s^T`` over rows, ``s`` the row softmax."""
    p = _Rows(omega, lam, row_weights)
    _, soft = p.terms(np.asarray(u, dtype=float))
    w = np.full(p.n, 1.0 / p.n) if p.w is None else p.w
    H = np.diag(w @ soft) - (soft * w[:, None]).T @ soft
    return 0.5 * (H + H.T)


# --------------------------------------------------------------------------
# optimization


@dataclass(frozen=True)
class SolverConfig:
    """Optimizer settings.

    The defaults are fixed-budget minibatch descent (4000 iterations,
    batch 100, step 1e-2, momentum 0.9).  Use :meth:`full` for
    deterministic full-gradient descent to tolerance.
    """

    mode: str = "minibatch"
    max_iters: int = 4000
    batch_size: int = 100
    learning_rate: float = 1e-2
    momentum: float = 0.9
    grad_tol: float = 1e-8
    init: str = "zero"
    seed: int = 0
    trace_every: int | None = None

    def __post_init__(self):
        if self.mode not in ("full", "minibatch"):
            raise ConfigError(f"unknown solver mode {self.mode!r}")
        if self.init not in ("zero", "normal"):
            raise ConfigError(f"unknown init {self.init!r}")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if not 0 <= self.momentum < 1:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.batch_size < 1 or self.max_iters < 0:
            raise ConfigError("batch_size must be >= 1 and max_iters >= 0")

    @classmethod
    def minibatch(cls, seed: int = 0, **kw) -> "SolverConfig":
        return cls(mode="minibatch", seed=seed, **kw)

    @classmethod
    def full(cls, **kw) -> "SolverConfig":
        # Hessian eigenvalues are at most 1/2, so plain steps stay stable below 4
        kw = {"learning_rate": 2.0, "momentum": 0.9, "max_iters": 200_000, "grad_tol": 1e-8, **kw}
        return cls(mode="full", **kw)

    @classmethod
    def from_dict(cls, d: dict) -> "SolverConfig":
        """Full-gradient defaults unless ``mode`` is ``minibatch``."""
        d = dict(d)
        try:
            if d.get("mode", "full") == "minibatch":
                return cls(**d)
            d.pop("mode", None)
            return cls.full(**d)
        except TypeError as exc:
            raise ConfigError(f"solver config: {exc}") from None

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class SolverResult:
    u_hat: np.ndarray
    W_hat: np.ndarray
    final_grad_norm: float
    iterations: int
    objective: float
    converged: bool
    trace: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "u_hat": self.u_hat.tolist(),
            "W_hat": self.W_hat.tolist(),
            "final_grad_norm": self.final_grad_norm,
            "iterations": self.iterations,
            "objective": self.objective,
            "converged": self.converged,
            "warnings": list(self.warnings),
        }

    def trace_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["iter", "objective", "grad_norm"])
        for it, f, g in self.trace:
            w.writerow([it, FLOAT_FMT.format(f), FLOAT_FMT.format(g)])
        return buf.getvalue()


def normalize_u(u, lam) -> tuple[np.ndarray, np.ndarray]:
    """Shift ``u`` so that ``W_K = 1``; returns ``(u, W)``."""
    lam = np.asarray(lam, dtype=float)
    u = np.asarray(u, dtype=float)
    u = u - u.max()  # keep exp() in range; D is shift invariant
    W = lam * np.exp(-u)
    W = W / W[-1]
    return np.log(lam / W), W


def _compress(vals, row_weights):
    """Merge identical omega rows, summing their weights (D is separable in rows)."""
    uniq, inv, counts = np.unique(vals, axis=0, return_inverse=True, return_counts=True)
    inv = inv.ravel()
    if len(uniq) == len(vals):
        return vals, row_weights
    if row_weights is None:
        w = counts / len(vals)
    else:
        w = np.bincount(inv, weights=row_weights, minlength=len(uniq))
    return uniq, w


def solve(omega, lam, cfg: SolverConfig | None = None, row_weights=None, source=None) -> SolverResult:
    """Minimize ``D`` and return normalizer estimates with ``W_K = 1``.

    Parameters
    ----------
    omega : OmegaMatrix or array of shape (n, K)
    lam : array of shape (K,)
        Source proportions ``n_k / n``.
    cfg : SolverConfig, optional
        Defaults to :meth:`SolverConfig.full`.
    row_weights : array of shape (n,), optional
        Replaces the uniform ``1/n`` weights (population solves).
    source : array of shape (n,), optional
        Source of each row; taken from ``omega`` when it is an OmegaMatrix.
        Used only to attach a connectivity warning.
    """
    cfg = cfg or SolverConfig.full()
    vals = _values(omega)
    lam = np.asarray(lam, dtype=float)
    K = vals.shape[1]
    warnings = []
    if source is None and isinstance(omega, OmegaMatrix):
        source = omega.source
    if source is not None and K > 1:
        adj = support_graph(vals, source, K)
        comps = strongly_connected_components(adj)
        if len(comps) > 1:
            warnings.append(f"NotConnected: overlap graph has components {comps}; normalizer ratios across them are unidentifiable")

    if cfg.init == "normal":
        u = stream(cfg.seed, 0).standard_normal(K)
    else:
        u = np.zeros(K)

    if K == 1:
        _Rows(vals, lam, row_weights)  # validates rows
        u_n, W = normalize_u(u, lam)
        return SolverResult(u_n, W, 0.0, 0, 0.0, True, [(0, 0.0, 0.0)], warnings)

    if cfg.mode == "full":
        cvals, cw = _compress(vals, row_weights)
        prob = _Rows(cvals, lam, cw)
        u, it, f, gnorm, trace = _full_gradient(prob, u, cfg)
    else:
        prob = _Rows(vals, lam, row_weights)
        u, it, f, gnorm, trace = _minibatch(prob, u, cfg)

    converged = gnorm <= cfg.grad_tol
    if not converged:
        warnings.append(f"stopped after {it} iterations with gradient norm {gnorm:.3g} > {cfg.grad_tol:g}")
    u_n, W = normalize_u(u, lam)
    return SolverResult(u_n, W, gnorm, it, f, converged, trace, warnings)


# exp(-u) overflows W beyond this spread
MAX_U_SPREAD = 700.0


def _check_finite(u, f, it):
    # the negated form also catches NaN
    if not (math.isfinite(f) and u.max() - u.min() <= MAX_U_SPREAD):
        raise Diverged(f"iterate left the representable range at iteration {it}")


def _full_gradient(prob: _Rows, u, cfg: SolverConfig):
    """Heavy-ball descent; a step that raises D is redone without momentum."""
    lr, mu = cfg.learning_rate, cfg.momentum
    every = cfg.trace_every or 1
    f, g = prob.value_and_grad(u)
    v = np.zeros_like(u)
    trace = [(0, f, float(np.abs(g).max()))]
    rises = 0
    it = 0
    while it < cfg.max_iters and np.abs(g).max() > cfg.grad_tol:
        it += 1
        v_new = mu * v + g
        u_new = u - lr * v_new
        f_new, g_new = prob.value_and_grad(u_new)
        if f_new > f and mu > 0:
            v_new = g
            u_new = u - lr * g
            f_new, g_new = prob.value_and_grad(u_new)
        if f_new > f + 1e-12 * max(1.0, abs(f)):
            rises += 1
            if rises >= 10:
                raise Diverged(f"objective increased for {rises} consecutive steps (learning_rate={lr:g})")
        else:
            rises = 0
        _check_finite(u_new, f_new, it)
        u, v, f, g = u_new, v_new, f_new, g_new
        if it % every == 0:
            trace.append((it, f, float(np.abs(g).max())))
    gnorm = float(np.abs(g).max())
    if trace[-1][0] != it:
        trace.append((it, f, gnorm))
    return u, it, f, gnorm, trace


def _minibatch(prob: _Rows, u, cfg: SolverConfig):
    """Minibatch SGD with momentum, rows drawn uniformly (or by row weight)."""
    rng = stream(cfg.seed, 1)
    lr, mu = cfg.learning_rate, cfg.momentum
    b = min(cfg.batch_size, prob.n)
    every = cfg.trace_every or 100
    p = None if prob.w is None else prob.w / prob.w.sum()
    v = np.zeros_like(u)
    f, g = prob.value_and_grad(u)
    trace = [(0, f, float(np.abs(g).max()))]
    it = 0
    while it < cfg.max_iters:
        it += 1
        rows = rng.integers(0, prob.n, size=b) if p is None else rng.choice(prob.n, size=b, p=p)
        _, soft = prob.terms(u, rows)
        v = mu * v + (soft.mean(axis=0) - prob.lam)
        u = u - lr * v
        if it % every == 0 or it == cfg.max_iters:
            f, g = prob.value_and_grad(u)
            _check_finite(u, f, it)
            trace.append((it, f, float(np.abs(g).max())))
            if np.abs(g).max() <= cfg.grad_tol:
                break
    f, g = prob.value_and_grad(u)
    return u, it, f, float(np.abs(g).max()), trace


# --------------------------------------------------------------------------
# overlap diagnostics


def support_graph(vals, source, K) -> np.ndarray:
    """``adj[k, l]`` is True iff some row of source ``l`` has ``omega_k > 0``."""
    vals = _values(vals)
    source = np.asarray(source)
    adj = np.zeros((K, K), dtype=bool)
    for l in range(K):
        m = source == l
        if m.any():
            adj[:, l] = (vals[m] > 0).any(axis=0)
    return adj


def _reach(adj: np.ndarray) -> np.ndarray:
    K = len(adj)
    reach = adj | np.eye(K, dtype=bool)
    for start in range(K):
        # depth-first search from each vertex
        seen = np.zeros(K, dtype=bool)
        stack = [start]
        seen[start] = True
        while stack:
            k = stack.pop()
            for l in np.flatnonzero(adj[k]):
                if not seen[l]:
                    seen[l] = True
                    stack.append(int(l))
        reach[start] = seen
    return reach


def strongly_connected_components(adj) -> list[list[int]]:
    adj = np.asarray(adj, dtype=bool)
    reach = _reach(adj)
    mutual = reach & reach.T
    comps, done = [], set()
    for k in range(len(adj)):
        if k in done:
            continue
        comp = [int(l) for l in np.flatnonzero(mutual[k])]
        done.update(comp)
        comps.append(comp)
    return comps


def is_strongly_connected(adj) -> bool:
    return len(strongly_connected_components(adj)) == 1


def bottleneck_overlap(kappa: np.ndarray) -> float:
    """Largest ``kappa`` for which the graph of pairs with overlap >= kappa is connected."""
    K = len(kappa)
    if K == 1:
        return 1.0
    edges = sorted(((kappa[k, l], k, l) for k in range(K) for l in range(k + 1, K)), reverse=True)
    parent = list(range(K))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    joined = 1
    for w, k, l in edges:
        rk, rl = find(k), find(l)
        if rk != rl:
            parent[rk] = rl
            joined += 1
            if joined == K:
                return float(w)
    return 0.0


@dataclass
class OverlapDiagnostics:
    graph: np.ndarray
    connected: bool
    components: list
    epsilon_hat: float
    kappa_hat: np.ndarray
    kappa_min: float
    sigma2: float | None
    U_bound: float
    warnings: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "graph": self.graph.astype(int).tolist(),
            "connected": self.connected,
            "components": self.components,
            "epsilon_hat": self.epsilon_hat,
            "kappa_hat": self.kappa_hat.tolist(),
            "kappa_min": self.kappa_min,
            "sigma2": self.sigma2,
            "U_bound": self.U_bound,
            "warnings": list(self.warnings),
        }


def u_bound(K: int, lambda_min: float, kappa: float, eps: float) -> float:
    """``log(2K/eps) * sum_{t=1}^{K-1} 2^t (lambda_min kappa eps)^(-t)``."""
    base = lambda_min * kappa * eps
    if K == 1:
        return 0.0
    if base <= 0:
        return math.inf
    return math.log(2 * K / eps) * sum(2.0**t * base ** (-t) for t in range(1, K))


def diagnose(omega: OmegaMatrix, lam, u_hat=None, row_weights=None) -> OverlapDiagnostics:
    """Empirical overlap diagnostics.

    ``kappa_hat[k, l]`` is the mass of rows where both ``omega_k`` and
    ``omega_l`` are positive, under the debiased weights implied by ``u_hat``
    (under the plain empirical distribution when ``u_hat`` is None).
    """
    vals = _values(omega)
    n, K = vals.shape
    lam = np.asarray(lam, dtype=float)
    source = omega.source if isinstance(omega, OmegaMatrix) else None
    warnings = []

    if source is not None:
        adj = support_graph(vals, source, K)
    else:
        adj = np.ones((K, K), dtype=bool)
        warnings.append("no source labels: graph assumed complete")
    comps = strongly_connected_components(adj)

    positive = vals[vals > 0]
    eps = float(positive.min())

    base = np.full(n, 1.0 / n) if row_weights is None else np.asarray(row_weights, dtype=float)
    if u_hat is not None:
        # debiased weights: row mass / sum_l exp(u_l) omega_l
        prob = _Rows(vals, lam, row_weights)
        lse, _ = prob.terms(np.asarray(u_hat, dtype=float))
        mass = base * np.exp(-(lse - lse.min()))
    else:
        mass = base
    mass = mass / mass.sum()
    on = (vals > 0).astype(float)
    kappa = (on * mass[:, None]).T @ on

    sigma2 = None
    if K >= 2 and u_hat is not None:
        ev = np.linalg.eigvalsh(hessian(vals, lam, u_hat, row_weights))
        sigma2 = float(ev[1])
        if sigma2 < 1e-10:
            warnings.append(f"second smallest Hessian eigenvalue is {sigma2:.3g}")

    kmin = bottleneck_overlap(kappa)
    U = u_bound(K, float(lam.min()), kmin, eps)
    if len(comps) > 1:
        warnings.append(f"overlap graph is not strongly connected: components {comps}")
    return OverlapDiagnostics(
        graph=adj,
        connected=len(comps) == 1,
        components=comps,
        epsilon_hat=eps,
        kappa_hat=kappa,
        kappa_min=kmin,
        sigma2=sigma2,
        U_bound=U,
        warnings=warnings,
    )
