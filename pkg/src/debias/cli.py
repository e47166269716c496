"""Command-line pipeline: generate, solve, evaluate, study-two-point, threshold, rerun.

Every command writes its outputs plus a ``manifest.json`` into ``--out``.
Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import io as fio
from .core import SourceDataset, Tabular, build_omega_matrix
from .errors import ConfigError, DebiasError, MissingField, NotConnected
from .estimators import estimate_boxes, estimate_class_counts
from .generators import (
    ClassImbalanceConfig,
    HsvBinConfig,
    PowerLawConfig,
    TwoPointConfig,
    gen_class_imbalance,
    gen_hsv_bins,
    gen_power_law,
    gen_two_point,
    power_law_proportions,
)
from .harness import GaussianFeatures, ScenarioConfig, TrainConfig, compare, evaluate, train
from .oracle import closed_form_threshold, optimal_threshold, run_two_point_study, stationarity_residual, study_csv
from .seeding import stream
from .solver import SolverConfig, diagnose, solve
from .weights import WeightVector, compute_pi, debiased_distribution, gini, total_variation

SCENARIOS = ("class_imbalance", "hsv_bins", "power_law", "two_point")


def _pick(cfg: dict, allowed: tuple, where: str) -> dict:
    extra = sorted(set(cfg) - set(allowed))
    if extra:
        raise ConfigError(f"{where}: unknown key(s) {extra}")
    return {k: cfg[k] for k in allowed if k in cfg}


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([fio.fmt(v) if isinstance(v, (float, np.floating)) else v for v in r])
    return buf.getvalue()


# --------------------------------------------------------------------------
# generate


def _generate(cfg: dict):
    """Returns ``(data, meta)`` for the scenario named in ``cfg``."""
    if "scenario" not in cfg:
        raise ConfigError("config needs a 'scenario' key, one of " + ", ".join(SCENARIOS))
    kind = cfg["scenario"]
    body = {k: v for k, v in cfg.items() if k != "scenario"}
    seed = int(body.get("seed", 0))
    meta = {"scenario": kind, "seed": seed}

    if kind == "class_imbalance":
        kw = _pick(body, ("M", "K", "gamma", "n_k", "seed", "features", "class_permutation"), kind)
        feats = kw.pop("features", {"d": 16, "separation": 3.0, "pool_per_class": 2000})
        ci = ClassImbalanceConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in kw.items()})
        pool = None
        if feats is not None:
            f = _pick(feats, ("d", "separation", "pool_per_class"), "features")
            gf = GaussianFeatures(ci.M, f.get("d", 16), f.get("separation", 3.0))
            pool = gf.pool(f.get("pool_per_class", 2000), seed)
            meta["features"] = {"d": gf.d, "separation": gf.separation}
        data, specs = gen_class_imbalance(ci, pool)
    elif kind == "hsv_bins":
        kw = _pick(body, ("population_size", "gamma_ramp", "n_total", "alpha", "n_k", "seed"), kind)
        size = int(kw.pop("population_size", 5000))
        e = stream(seed, 100).random((size, 3))
        pop = SourceDataset(index=0, ids=np.arange(size), labels=np.full(size, -1), embeddings=e)
        if "n_k" in kw:
            kw["n_k"] = tuple(kw["n_k"])
        data, specs, bins = gen_hsv_bins(HsvBinConfig(pop, **kw))
        meta["bins"] = [{"index": b.index, "lower": list(b.lower), "upper": list(b.upper)} for b in bins]
    elif kind == "power_law":
        kw = _pick(body, ("p", "gamma", "seed", "permutation", "pool_sizes"), kind)
        sizes = kw.pop("pool_sizes", None)
        pl = PowerLawConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in kw.items()})
        sizes = [1000] * pl.K if sizes is None else sizes
        if len(sizes) != pl.K:
            raise ConfigError(f"power_law: {len(sizes)} pool sizes for {pl.K} modalities")
        start = np.concatenate([[0], np.cumsum(sizes)])
        pool = {
            k: SourceDataset(index=0, ids=start[k] + np.arange(s), labels=np.full(s, k), strata=np.full(s, k))
            for k, s in enumerate(sizes)
        }
        data = gen_power_law(pl, pool)
        sigma = pl.sigma()
        target = power_law_proportions(pl.p, pl.gamma, sigma)
        ratio = np.divide(target, pl.p, out=np.zeros(pl.K), where=np.asarray(pl.p) > 0)
        specs = [Tabular({k: float(r) for k, r in enumerate(ratio)}, key="stratum")]
        meta["sigma"] = sigma.tolist()
        meta["target_proportions"] = target.tolist()
    elif kind == "two_point":
        kw = _pick(body, ("R", "n", "seed"), kind)
        data, specs = gen_two_point(TwoPointConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in kw.items()}))
    else:
        raise ConfigError(f"unknown scenario {kind!r}; expected one of {', '.join(SCENARIOS)}")
    meta["true_specs"] = [s.to_dict() for s in specs]
    return data, meta


def cmd_generate(cfg: dict, args: dict, out: Path, threads: int = 1):
    data, meta = _generate(cfg)
    return [], fio.save_dataset(out, data, meta)


# --------------------------------------------------------------------------
# solve


def _specs_for(mode: str, data, meta):
    if mode == "true":
        return fio.specs_from_meta(meta)
    if mode == "counts":
        return estimate_class_counts(data)
    if mode == "boxes":
        return estimate_boxes(data)
    raise ConfigError(f"unknown bias mode {mode!r}")


def cmd_solve(cfg: dict, args: dict, out: Path, threads: int = 1):
    ds = Path(args["dataset"])
    data, meta = fio.load_dataset(ds)
    body = _pick(cfg, ("solver", "max_weight", "seed"), "solve config")
    solver_cfg = SolverConfig.from_dict(body.get("solver", {}))

    om = build_omega_matrix(_specs_for(args.get("bias", "true"), data, meta), data)
    outputs = [out / "omega.csv", out / "diagnostics.json"]
    fio.write_text(outputs[0], om.to_csv())
    diag = diagnose(om, data.lam)
    fio.write_json(outputs[1], diag.to_dict())
    if not diag.connected:
        raise NotConnected(
            f"overlap graph is not strongly connected; components {diag.components}", diag.components
        )
    res = solve(om, data.lam, solver_cfg)
    pi = compute_pi(om, data.lam, res.W_hat, body.get("max_weight"))
    diag = diagnose(om, data.lam, res.u_hat)
    fio.write_json(outputs[1], diag.to_dict())
    summary = {**res.to_dict(), "gini": gini(pi), "solver": solver_cfg.to_dict()}
    outputs += [out / "solution.json", out / "trace.csv"]
    fio.write_json(outputs[2], summary)
    fio.write_text(outputs[3], res.trace_csv())
    if args.get("format", "csv") == "json":
        outputs.append(out / "weights.json")
        fio.write_json(
            outputs[-1],
            {"source": pi.source.tolist(), "obs": pi.obs.tolist(), "pi": pi.pi.tolist(), "unnormalized": pi.unnormalized.tolist()},
        )
    else:
        outputs.append(out / "weights.csv")
        fio.write_text(outputs[-1], pi.to_csv())
    return [ds / fio.DATASET_CSV], outputs


# --------------------------------------------------------------------------
# evaluate

SWEEP_COLUMNS = ["gamma", "seed", "naive_acc", "debiased_acc", "gini", "l2_to_uniform", "tv_to_uniform"]


def _sweep(cfg: dict, threads: int):
    sweep = cfg.get("sweep", {})
    base = {k: v for k, v in cfg.items() if k != "sweep"}
    gammas = sweep.get("gamma", [base.get("gamma", ScenarioConfig.gamma)])
    seeds = sweep.get("seeds", [base.get("seed", 0)])
    jobs = [ScenarioConfig.from_dict({**base, "gamma": g, "seed": s}) for g in gammas for s in seeds]
    if threads > 1:
        with ThreadPoolExecutor(threads) as ex:
            return list(ex.map(compare, jobs))
    return [compare(j) for j in jobs]


def _eval_weights(cfg: dict, args: dict):
    data, meta = fio.load_dataset(args["dataset"])
    wpath = Path(args["weights"])
    try:
        pi = WeightVector.from_csv(wpath.read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"{wpath}: {exc.strerror}") from None
    if "features" not in meta:
        raise MissingField("dataset has no features; regenerate with a 'features' block")
    body = _pick(cfg, ("train", "test_per_class", "seed"), "evaluate config")
    tcfg = TrainConfig(**body.get("train", {}))
    gf = GaussianFeatures(data.M, meta["features"]["d"], meta["features"]["separation"])
    test = gf.balanced_test(int(body.get("test_per_class", 500)), int(body.get("seed", 0)))
    ev_n = evaluate(train(data, tcfg), test)
    ev_d = evaluate(train(data, tcfg, pi), test)
    naive_mass = debiased_distribution(WeightVector.uniform(data.n), data).dense(data.M)
    deb_mass = debiased_distribution(pi, data).dense(data.M)
    ref = np.full(data.M, 1.0 / data.M)
    report = {
        "naive_acc": ev_n["accuracy"],
        "debiased_acc": ev_d["accuracy"],
        "naive_per_class": ev_n["per_class_accuracy"],
        "debiased_per_class": ev_d["per_class_accuracy"],
        "gini": gini(pi),
        "tv_to_uniform": total_variation(deb_mass, ref),
    }
    rows = [(y, float(naive_mass[y]), float(deb_mass[y]), float(ref[y])) for y in range(data.M)]
    table = _csv(["label", "naive_mass", "debiased_mass", "reference"], rows)
    return [Path(args["dataset"]) / fio.DATASET_CSV, wpath], report, table


def cmd_evaluate(cfg: dict, args: dict, out: Path, threads: int = 1):
    if args.get("dataset"):
        if not args.get("weights"):
            raise ConfigError("--dataset needs --weights")
        inputs, report, table = _eval_weights(cfg, args)
        name = "distribution.csv"
    else:
        results = _sweep(cfg, threads)
        inputs, report = [], {"runs": results}
        table = _csv(SWEEP_COLUMNS, [[r[c] for c in SWEEP_COLUMNS] for r in results])
        name = "sweep.csv"
    outputs = [out / "report.json", out / name]
    fio.write_json(outputs[0], report)
    fio.write_text(outputs[1], table)
    return inputs, outputs


# --------------------------------------------------------------------------
# studies


def cmd_study_two_point(cfg: dict, args: dict, out: Path, threads: int = 1):
    body = _pick(cfg, ("R_grid", "n_1", "n_2", "trials", "seed", "solver"), "study config")
    solver_cfg = SolverConfig.from_dict(body.pop("solver")) if "solver" in body else None
    cells = run_two_point_study(**body, solver_cfg=solver_cfg, threads=threads)
    outputs = [out / "study.csv"]
    fio.write_text(outputs[0], study_csv(cells))
    return [], outputs


def cmd_threshold(cfg: dict, args: dict, out: Path, threads: int = 1):
    body = _pick(cfg, ("shapes", "p", "seed"), "threshold config")
    shapes = body.get("shapes", [[0, 0], [0.5, 0.5], [1, 1], [2, 2]])
    ps = body.get("p", [0.1, 0.25, 0.5, 0.75, 0.9])
    rows = []
    for a, b in shapes:
        for p in ps:
            theta = optimal_threshold(a, b, p)
            try:
                closed_form_threshold(a, b, p)
                method = "closed_form"
            except DebiasError:
                method = "bisection"
            resid = 0.0 if a == b == 0 else abs(stationarity_residual(theta, a, b, p))
            rows.append((float(a), float(b), float(p), float(theta), method, float(resid)))
    outputs = [out / "threshold.csv"]
    fio.write_text(outputs[0], _csv(["alpha", "beta", "p", "theta_star", "method", "residual"], rows))
    return [], outputs


COMMANDS = {
    "generate": cmd_generate,
    "solve": cmd_solve,
    "evaluate": cmd_evaluate,
    "study-two-point": cmd_study_two_point,
    "threshold": cmd_threshold,
}


# --------------------------------------------------------------------------
# entry point


def run(command: str, cfg: dict, args: dict, out, threads: int = 1) -> dict:
    """Execute one command and write its manifest; returns the manifest."""
    if threads < 1:
        raise ConfigError("--threads must be >= 1")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    inputs, outputs = COMMANDS[command](cfg, args, out, threads)
    man = fio.manifest(command, cfg, cfg.get("seed", 0), inputs, outputs, out, time.perf_counter() - t0, args)
    fio.write_json(out / "manifest.json", man)
    return man


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="debias", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config_required=False):
        p.add_argument("--config", required=config_required, help="JSON config file")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("--format", choices=("csv", "json"), default="csv")

    common(sub.add_parser("generate", help="sample biased datasets"), config_required=True)
    p = sub.add_parser("solve", help="estimate normalizers and weights for a dataset")
    common(p)
    p.add_argument("--dataset", required=True, help="directory written by 'generate'")
    p.add_argument("--bias", choices=("true", "counts", "boxes"), default="true")
    p = sub.add_parser("evaluate", help="naive vs debiased training")
    common(p)
    p.add_argument("--dataset", help="directory written by 'generate'")
    p.add_argument("--weights", help="weights.csv written by 'solve'")
    common(sub.add_parser("study-two-point", help="Gini table on the two-point model"))
    common(sub.add_parser("threshold", help="optimal thresholds on [0, 1]"))
    p = sub.add_parser("rerun", help="repeat a run from its manifest")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int, default=1)
    return ap


def main(argv=None) -> int:
    ns = build_parser().parse_args(argv)
    try:
        if ns.command == "rerun":
            man = fio.load_json(ns.manifest)
            if man.get("command") not in COMMANDS:
                raise ConfigError(f"{ns.manifest}: unknown command {man.get('command')!r}")
            run(man["command"], man["config"], man.get("args", {}), ns.out, ns.threads)
            return 0
        cfg = fio.load_json(ns.config) if ns.config else {}
        if ns.seed is not None:
            cfg["seed"] = ns.seed
        args = {"format": ns.format}
        for key in ("dataset", "weights", "bias"):
            if getattr(ns, key, None) is not None:
                args[key] = getattr(ns, key)
        run(ns.command, cfg, args, ns.out, ns.threads)
    except DebiasError as exc:
        print(f"debias {ns.command}: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"debias {ns.command}: error: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
