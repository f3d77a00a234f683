"""Command-line entry point: validate, simulate, limit and converge."""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import os
import sys
from pathlib import Path

import jsonschema
import numpy as np
import yaml

from . import __version__
from .convergence_lab import _jsonable, run_convergence_scan
from .gp_models import VarianceFunction
from .limit_laws import LimitLawSpec, build_sigma_matrix, sample_limit_workload
from .network import NetworkSpec, check_assumptions
from .workload import PITERBARG_C, WorkloadSample, compute_Q_scaled

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
PATH_REPLICATES = 5
QUANTILES = (0.05, 0.25, 0.5, 0.75, 0.95)

_num = {"type": "number"}
_pos = {"type": "number", "exclusiveMinimum": 0}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["variance_function", "network", "simulation"],
    "properties": {
        "variance_function": {
            "type": "object",
            "additionalProperties": False,
            "required": ["kind"],
            "properties": {
                "kind": {"enum": ["power", "power_sum", "integrated_ou"]},
                "lambda": _pos,
                "exponents": {"type": "array", "items": _pos, "minItems": 1},
                "weights": {"type": "array", "items": _pos, "minItems": 1},
            },
        },
        "network": {
            "type": "object",
            "additionalProperties": False,
            "required": ["n", "rates", "regime"],
            "properties": {
                "n": {"type": "integer", "minimum": 1},
                "P": {"type": "array", "items": {"type": "array", "prefixItems": [
                    {"type": "integer", "minimum": 1}, {"type": "integer", "minimum": 1}, _num],
                    "minItems": 3, "maxItems": 3}},
                "rates": {"type": "array", "items": {"type": "array", "items": _num, "minItems": 2, "maxItems": 2}},
                "regime": {"enum": ["light", "heavy"]},
            },
        },
        "simulation": {
            "type": "object",
            "additionalProperties": False,
            "required": ["T", "dt", "replicates", "u_grid", "master_seed"],
            "properties": {
                "T": _pos,
                "dt": _pos,
                "replicates": {"type": "integer"},
                "u_grid": {"type": "array", "items": _pos},
                "master_seed": {"type": "integer", "minimum": 0},
                "ratio_cap": _pos,
                "method": {"enum": ["auto", "circulant", "dense", "independent"]},
                "times": {"type": "array", "items": {"type": "number", "minimum": 0}, "minItems": 1},
                "sigma_times": {"type": "array", "items": {"type": "array", "items": _num, "minItems": 2,
                                                           "maxItems": 2}},
                "zeta_grid": {"type": "array", "items": _pos},
                "bootstrap_resamples": {"type": "integer", "minimum": 2},
                "nested_sup": {"type": "boolean"},
                "truncation": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "target_prob": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                        "piterbarg_constant": _pos,
                        "basis": {"enum": ["input", "limit"]},
                        "t_past": {"oneOf": [_pos, {"type": "null"}]},
                        "doubling_replicates": {"type": "integer", "minimum": 0},
                    },
                },
            },
        },
        "outputs": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "directory": {"type": "string"},
                "emit_paths": {"type": "boolean"},
                "emit_plots": {"type": "boolean"},
            },
        },
    },
}


class ConfigError(ValueError):
    pass


def _locate(root, path) -> str:
    """Line/column of the YAML node at a jsonschema error path."""
    node = root
    for key in path:
        if isinstance(node, yaml.MappingNode):
            nxt = None
            for k, v in node.value:
                if k.value == key:
                    nxt = v
                    break
            if nxt is None:
                break
            node = nxt
        elif isinstance(node, yaml.SequenceNode) and isinstance(key, int) and key < len(node.value):
            node = node.value[key]
        else:
            break
    if node is None:
        return ""
    m = node.start_mark
    return f"line {m.line + 1}, column {m.column + 1}"


def load_config(path) -> dict:
    """Parse and schema-check a YAML experiment config."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    try:
        root = yaml.compose(text)
        cfg = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark is not None else ""
        raise ConfigError(f"{path}: parse error{where}: {getattr(exc, 'problem', exc)}") from exc
    if not isinstance(cfg, dict):
        raise ConfigError(f"{path}: top level must be a mapping")
    validator = jsonschema.Draft202012Validator(CONFIG_SCHEMA)
    errors = sorted(validator.iter_errors(cfg), key=lambda e: list(map(str, e.absolute_path)))
    if errors:
        e = errors[0]
        loc = _locate(root, list(e.absolute_path))
        key = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ConfigError(f"{path}: {loc}: {key}: {e.message}" if loc else f"{path}: {key}: {e.message}")
    return cfg


def build_variance_function(d: dict) -> VarianceFunction:
    kind = d["kind"]
    if kind == "power":
        if "lambda" not in d or "exponents" in d or "weights" in d:
            raise ConfigError("power takes exactly one parameter 'lambda'")
        return VarianceFunction.power(d["lambda"])
    if kind == "power_sum":
        if "exponents" not in d or "lambda" in d:
            raise ConfigError("power_sum takes 'exponents' and optional 'weights'")
        return VarianceFunction.power_sum(d["exponents"], d.get("weights"))
    if set(d) != {"kind"}:
        raise ConfigError("integrated_ou takes no parameters")
    return VarianceFunction.integrated_ou()


def build_network(d: dict) -> NetworkSpec:
    n = d["n"]
    trip = d.get("P", [])
    for i, j, _ in trip:
        if i > n or j > n:
            raise ConfigError(f"routing entry ({i},{j}) outside a {n}-node network")
    if len(d["rates"]) != n:
        raise ConfigError(f"{len(d['rates'])} rates given for {n} nodes")
    return NetworkSpec.from_triplets(n, trip, d["rates"], d["regime"])


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


class Experiment:
    """Resolved config with defaults applied and CLI overrides folded in."""

    def __init__(self, cfg: dict, seed: int | None = None, out: str | None = None, threads: int | None = None):
        cfg = copy.deepcopy(cfg)
        if seed is not None:
            cfg["simulation"]["master_seed"] = int(seed)
        cfg.setdefault("outputs", {})
        if out is not None:
            cfg["outputs"]["directory"] = str(out)
        self.cfg = cfg
        # the output directory and thread count do not change results
        hashed = copy.deepcopy(cfg)
        hashed["outputs"].pop("directory", None)
        self.sha = config_hash(hashed)
        self.vf = build_variance_function(cfg["variance_function"])
        self.spec = build_network(cfg["network"])
        sim = cfg["simulation"]
        tr = sim.get("truncation", {})
        self.T = float(sim["T"])
        self.dt = float(sim["dt"])
        self.replicates = int(sim["replicates"])
        self.u_grid = [float(u) for u in sim["u_grid"]]
        self.seed = int(sim["master_seed"])
        self.ratio_cap = float(sim.get("ratio_cap", 1e4))
        self.method = sim.get("method", "auto")
        self.times = [float(t) for t in sim.get("times", [0.0])]
        self.sigma_times = [tuple(map(float, p)) for p in sim.get("sigma_times", [[1.0, 1.0]])]
        self.zeta_grid = sim.get("zeta_grid")
        self.n_boot = int(sim.get("bootstrap_resamples", 200))
        self.nested_sup = bool(sim.get("nested_sup", False))
        self.target_prob = float(tr.get("target_prob", 1e-4))
        self.piterbarg_c = float(tr.get("piterbarg_constant", PITERBARG_C))
        self.basis = tr.get("basis", "input")
        self.t_past = tr.get("t_past")
        self.doubling_replicates = tr.get("doubling_replicates")
        outs = cfg["outputs"]
        self.out_dir = Path(outs.get("directory", "out"))
        self.emit_paths = bool(outs.get("emit_paths", False))
        self.emit_plots = bool(outs.get("emit_plots", False))
        self.threads = int(threads) if threads else (os.cpu_count() or 1)
        for t in self.times:
            if t > self.T + 1e-12:
                raise ConfigError(f"evaluation time {t:g} exceeds T={self.T:g}")
            if abs(round(t / self.dt) * self.dt - t) > 1e-9 * max(1.0, t):
                raise ConfigError(f"evaluation time {t:g} is not a multiple of dt={self.dt:g}")

    @property
    def header(self) -> str:
        return f"config_sha256={self.sha}; tool_version={__version__}"

    def meta(self) -> dict:
        return {"config_sha256": self.sha, "tool_version": __version__}


def _fmt(x) -> str:
    if isinstance(x, str):
        return x
    return f"{float(x):.12g}"


def _write_text(path: Path, text: str) -> None:
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror}") from exc


def write_json(path: Path, obj: dict, exp: Experiment) -> None:
    body = {"meta": exp.meta(), **_jsonable(obj)}
    _write_text(path, json.dumps(body, sort_keys=True, indent=2) + "\n")


def write_csv(path: Path, header: list[str], rows, exp: Experiment) -> None:
    buf = io.StringIO()
    buf.write(f"# {exp.header}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    _write_text(path, buf.getvalue())


def _sample_rows(ws: WorkloadSample, u_label, times, replicates=None):
    idx = [ws.index_of(t) for t in times]
    reps = range(ws.xbar.shape[0]) if replicates is None else range(min(replicates, ws.xbar.shape[0]))
    for r in reps:
        for i in range(ws.n):
            for t, k in zip(times, idx):
                yield (u_label, int(ws.replicates[r]), i + 1, t, ws.xbar[r, i, k], ws.q[r, i, k])


CSV_HEADER = ["u", "replicate", "node", "t", "xbar_scaled", "q_scaled"]


def _summary(ws: WorkloadSample, times) -> dict:
    out = []
    R = ws.q.shape[0]
    for i in range(ws.n):
        for t in times:
            q = ws.q_at(t)[:, i]
            x = ws.xbar_at(t)[:, i]
            out.append({
                "node": i + 1, "t": t,
                "q_mean": float(q.mean()), "q_se": float(q.std(ddof=1) / np.sqrt(R)) if R > 1 else None,
                "xbar_mean": float(x.mean()), "xbar_se": float(x.std(ddof=1) / np.sqrt(R)) if R > 1 else None,
                "q_quantiles": {f"{p:g}": float(v) for p, v in zip(QUANTILES, np.quantile(q, QUANTILES))},
            })
    return {"replicates": R, "marginals": out, "truncation": [p.to_dict() for p in ws.plans]}


def _validate(exp: Experiment, out=None):
    rep = check_assumptions(exp.spec, exp.vf)
    for line in rep.lines():
        print(line, file=out or sys.stdout)
    return rep


def cmd_validate(exp: Experiment) -> int:
    rep = _validate(exp)
    print("validation passed" if rep.passed else "validation failed")
    return EXIT_OK if rep.passed else EXIT_INVALID


def _require_valid(exp: Experiment) -> bool:
    rep = check_assumptions(exp.spec, exp.vf)
    if not rep.passed:
        for line in rep.lines():
            print(line, file=sys.stderr)
        print("validation failed", file=sys.stderr)
    return rep.passed


def _sim_kwargs(exp: Experiment) -> dict:
    return dict(target_prob=exp.target_prob, piterbarg_c=exp.piterbarg_c,
                doubling_replicates=exp.doubling_replicates, ratio_cap=exp.ratio_cap, method=exp.method,
                threads=exp.threads, nested_sup=exp.nested_sup)


def cmd_simulate(exp: Experiment, u: float) -> int:
    if exp.replicates < 1:
        print("error: replicates must be >= 1", file=sys.stderr)
        return EXIT_INVALID
    if not _require_valid(exp):
        return EXIT_INVALID
    ws = compute_Q_scaled(exp.spec, exp.vf, u, exp.T, exp.dt, exp.seed, exp.replicates, basis=exp.basis,
                          t_past=exp.t_past, **_sim_kwargs(exp))
    tag = f"u{u:g}"
    write_csv(exp.out_dir / f"workload_{tag}.csv", CSV_HEADER, _sample_rows(ws, _fmt(u), exp.times), exp)
    write_json(exp.out_dir / f"summary_{tag}.json", {"u": u, **_summary(ws, exp.times)}, exp)
    if exp.emit_paths:
        write_csv(exp.out_dir / f"paths_{tag}.csv", CSV_HEADER,
                  _sample_rows(ws, _fmt(u), list(ws.t), PATH_REPLICATES), exp)
    print(f"wrote {exp.out_dir}/workload_{tag}.csv and summary_{tag}.json")
    return EXIT_OK


def cmd_limit(exp: Experiment) -> int:
    if not _require_valid(exp):
        return EXIT_INVALID
    lls = LimitLawSpec.from_network(exp.spec, exp.vf)
    sigma = [{"t": t, "s": s, "matrix": build_sigma_matrix(lls, t, s)} for t, s in exp.sigma_times]
    info = {
        "regime": lls.regime, "index": lls.index, "kappa_or_xi": lls.kappa_or_xi,
        "C": lls.C, "Pstar": lls.Pstar, "rlimits": lls.rlimits.r,
        "classes": [[i + 1 for i in c] for c in lls.partition.classes],
        "sigma": sigma,
    }
    print("P* =")
    print(np.array2string(lls.Pstar, precision=6))
    if exp.replicates >= 1:
        ws = sample_limit_workload(lls, exp.T, exp.dt, exp.seed, exp.replicates, **_sim_kwargs(exp))
        write_csv(exp.out_dir / "limit.csv", CSV_HEADER, _sample_rows(ws, "limit", exp.times), exp)
        info["summary"] = _summary(ws, exp.times)
        if exp.emit_paths:
            write_csv(exp.out_dir / "paths_limit.csv", CSV_HEADER,
                      _sample_rows(ws, "limit", list(ws.t), PATH_REPLICATES), exp)
    write_json(exp.out_dir / "limit.json", info, exp)
    print(f"wrote {exp.out_dir}/limit.json")
    return EXIT_OK


def _plots(exp: Experiment, report) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    # fixed salt and no date keep the SVG bytes reproducible
    plt.rcParams["svg.hashsalt"] = "gaussqnet"
    meta = {"Description": exp.header, "Date": None}
    if report.deterministic_gaps:
        fig, ax = plt.subplots(figsize=(5, 3.5))
        us = [g["u"] for g in report.deterministic_gaps]
        ax.plot(us, [g["cov_gap"] for g in report.deterministic_gaps], "o-", label="covariance gap")
        ax.plot(us, [g["pstar_gap"] for g in report.deterministic_gaps], "s-", label="P* gap")
        ax.set_xscale("log")
        ax.set_xlabel("u")
        ax.legend()
        fig.tight_layout()
        fig.savefig(exp.out_dir / "gaps.svg", metadata=meta)
        plt.close(fig)
    rows = [e for e in report.mc_distances if "fdd" in e]
    if rows:
        fig, ax = plt.subplots(figsize=(5, 3.5))
        us = [e["u"] for e in rows]
        n = len(rows[0]["fdd"]["ks"])
        for i in range(n):
            ks = [e["fdd"]["ks"][i][0] for e in rows]
            se = [e["fdd"]["ks_se"][i][0] for e in rows]
            ax.errorbar(us, ks, yerr=se, marker="o", capsize=3, label=f"node {i + 1}")
        ax.set_xscale("log")
        ax.set_xlabel("u")
        ax.set_ylabel(f"KS at t={rows[0]['fdd']['times'][0]:g}")
        ax.legend()
        fig.tight_layout()
        fig.savefig(exp.out_dir / "ks.svg", metadata=meta)
        plt.close(fig)


def cmd_converge(exp: Experiment) -> int:
    if exp.replicates < 0:
        print("error: replicates must be >= 0", file=sys.stderr)
        return EXIT_INVALID
    if not _require_valid(exp):
        return EXIT_INVALID
    report = run_convergence_scan(exp.spec, exp.vf, exp.u_grid, exp.times, exp.replicates, exp.seed, T=exp.T,
                                  dt=exp.dt, sigma_pairs=exp.sigma_times, zeta_grid=exp.zeta_grid,
                                  basis=exp.basis, t_past=exp.t_past, n_boot=exp.n_boot, **_sim_kwargs(exp))
    write_json(exp.out_dir / "convergence.json", report.to_dict(), exp)
    write_csv(exp.out_dir / "gaps.csv", ["u", "cov_gap", "pstar_gap"],
              ([g["u"], g["cov_gap"], g["pstar_gap"]] for g in report.deterministic_gaps), exp)
    if report.mc_distances:
        cols = ["u", "node", "t", "ks", "ks_se", "w1", "w1_se"]
        write_csv(exp.out_dir / "distances.csv", cols,
                  ([row[c] for c in cols] for row in report.distance_rows()), exp)
    if exp.emit_plots:
        _plots(exp, report)
    for stage, msg in sorted(report.stage_failures.items()):
        print(f"stage failed: {stage}: {msg}", file=sys.stderr)
    print(f"wrote {exp.out_dir}/convergence.json")
    return EXIT_OK if report.ok else EXIT_RUNTIME


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gaussqnet", description=__doc__)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in (("validate", "check network and variance-function assumptions"),
                        ("simulate", "sample scaled pre-limit workloads at one u"),
                        ("limit", "evaluate and sample the limit laws"),
                        ("converge", "scan u and compare against the limit")):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", required=True, help="YAML experiment config")
        sp.add_argument("--out", help="output directory (overrides outputs.directory)")
        sp.add_argument("--threads", type=int, help="worker threads (default: all cores)")
        sp.add_argument("--seed", type=int, help="master seed (overrides simulation.master_seed)")
        if name == "simulate":
            sp.add_argument("--u", type=float, required=True, help="scaling parameter")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        exp = Experiment(load_config(args.config), args.seed, args.out, args.threads)
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    try:
        if args.command == "validate":
            return cmd_validate(exp)
        if args.command == "simulate":
            return cmd_simulate(exp, args.u)
        if args.command == "limit":
            return cmd_limit(exp)
        return cmd_converge(exp)
    except Exception as exc:  # noqa: BLE001 - mapped to the runtime exit code
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
