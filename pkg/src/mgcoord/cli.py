"""
Command-line front end.

Subcommands::

    mgcoord solve       centralized KKT solve, JSON solution file
    mgcoord gs          one coordination run, CSV trace
    mgcoord spectrum    convergence certificates, JSON
    mgcoord experiment  several variants, one CSV plus an SVG chart

A run is described by a single JSON config; flags override its fields.
Exit codes: 0 success, 1 numerical failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cases import build_case
from .coarsening import CoarseningSchedule, case_transfer, run_multigrid, warm_start
from .coordination import CoordinationState, certify, oracle_state, run_gs
from .errors import ConfigError, MgCoordError, MissingMetadata, NonDivisor
from .lifting import Partitioning, lift_explicit
from .ordering import ORDERINGS, make_ordering
from .plotting import write_svg
from .qp_core import CoupledQP, solve_centralized

CASES = ("temporal", "spatial", "custom-json")
TRACE_COLUMNS = ("experiment", "step", "error_w", "error_primal_owned", "wall_time_ms")


@dataclass
class ExperimentConfig:
    case: str = "temporal"
    params: dict = field(default_factory=dict)
    problem: str = None
    ordering: str = "lexicographic"
    schedule: dict = None
    warm_start: str = "none"
    coarse_level: int = None
    tol: float = 1e-8
    max_steps: int = 500
    seed: int = 0
    output: str = None
    svg: str = None
    timing: bool = False
    workers: int = 1
    variants: list = None
    name: str = None

    @classmethod
    def from_dict(cls, doc):
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        known = set(cls.__dataclass_fields__)
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(f"unknown config fields: {', '.join(unknown)}")
        cfg = cls(**doc)
        cfg.validate()
        return cfg

    def validate(self):
        if self.case not in CASES:
            raise ConfigError(f"case must be one of {CASES}, got {self.case!r}")
        if self.case == "custom-json" and not self.problem:
            raise ConfigError("custom-json case needs a 'problem' path")
        if not isinstance(self.params, dict):
            raise ConfigError("params must be an object")
        try:
            self.tol = float(self.tol)
            self.max_steps = int(self.max_steps)
            self.seed = int(self.seed)
            self.workers = int(self.workers)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None
        if not self.tol > 0:
            raise ConfigError("tol must be positive")
        if self.max_steps < 0:
            raise ConfigError("max_steps must be nonnegative")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")
        if self.ordering not in ORDERINGS:
            raise ConfigError(f"unknown ordering {self.ordering!r}; choose from {ORDERINGS}")
        if self.warm_start not in ("none", "coarse"):
            raise ConfigError("warm_start must be 'none' or 'coarse'")
        if self.warm_start == "coarse" and self.coarse_level is None and self.case == "custom-json":
            raise ConfigError("coarse warm start is only defined for the case studies")
        if self.schedule is not None:
            self.schedule = _parse_schedule(self.schedule)
        if self.variants is not None:
            if not isinstance(self.variants, list):
                raise ConfigError("variants must be a list")
            for v in self.variants:
                if not isinstance(v, dict):
                    raise ConfigError("each variant must be an object")
                if "ordering" in v and v["ordering"] not in ORDERINGS:
                    raise ConfigError(f"unknown ordering {v['ordering']!r} in variant")
                if v.get("schedule") is not None:
                    v["schedule"] = _parse_schedule(v["schedule"])


def _parse_schedule(doc):
    if isinstance(doc, CoarseningSchedule):
        return doc
    try:
        if isinstance(doc, str):
            return CoarseningSchedule(tuple(int(s) for s in doc.split(",") if s.strip()))
        if isinstance(doc, (list, tuple)):
            return CoarseningSchedule(tuple(doc))
        return CoarseningSchedule.from_dict(doc)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"bad schedule: {exc}") from None


def _load_instance(cfg: ExperimentConfig):
    """Return ``(qp, partitioning or None, metadata)``."""
    if cfg.case == "custom-json":
        try:
            doc = json.loads(Path(cfg.problem).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read problem file: {exc}") from None
        qp = CoupledQP.from_dict(doc)
        part = Partitioning(doc["partition"]) if "partition" in doc else None
        meta = {"kind": "custom", "pi_owner": doc.get("pi_owner")}
        return qp, part, meta
    try:
        qp, part, meta = build_case(cfg.case, cfg.params)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad case parameters: {exc}") from None
    return qp, part, meta


def _lift(cfg, qp, part, meta):
    if part is None:
        raise ConfigError("problem has no 'partition' field")
    return lift_explicit(qp, part, pi_owner=meta.get("pi_owner"))


def _default_coarse_level(cfg, meta):
    if cfg.coarse_level is not None:
        return int(cfg.coarse_level)
    # defaults: 4 coarse points in time, 2 x 2 in space
    return 4 if meta.get("kind") == "temporal" else 2


def _fmt(x):
    return "" if x is None else repr(float(x))


def _trace_rows(name, trace, times=None):
    rows = []
    for i, r in enumerate(trace):
        wall = "" if times is None else f"{times[i]:.3f}"
        rows.append([name, r.step, _fmt(r.error_w), _fmt(r.error_primal_owned), wall])
    return rows


def _write_csv(path, rows, footers):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(TRACE_COLUMNS)
    writer.writerows(rows)
    for line in footers:
        buf.write(f"# {line}\n")
    text = buf.getvalue()
    if path:
        Path(path).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return text


def _run_variant(cfg, qp, part, meta, lifted, oracle, variant):
    ordering = variant.get("ordering", cfg.ordering)
    order = make_ordering(ordering, lifted, meta)
    tol = float(variant.get("tol", cfg.tol))
    max_steps = int(variant.get("max_steps", cfg.max_steps))
    schedule = variant.get("schedule")
    t0 = time.perf_counter()
    if schedule is not None:
        res = run_multigrid(qp, part, schedule, order, meta, lifted=lifted, oracle=oracle,
                            tol=tol, max_steps=max_steps)
    else:
        if variant.get("warm_start", cfg.warm_start) == "coarse":
            level = variant.get("coarse_level", _default_coarse_level(cfg, meta))
            init = warm_start(qp, lifted, case_transfer(meta, level))
        else:
            init = CoordinationState.zeros(lifted)
        res = run_gs(lifted, init, order, tol=tol, max_steps=max_steps, oracle=oracle)
    elapsed = (time.perf_counter() - t0) * 1e3
    return res, elapsed


def cmd_solve(cfg: ExperimentConfig):
    qp, part, meta = _load_instance(cfg)
    sol = solve_centralized(qp)
    z = sol.primal
    doc = {
        "status": "ok",
        "case": cfg.case,
        "n": int(qp.n),
        "objective": float(qp.objective(z)),
        "residual_norm": float(sol.residual_norm),
        "primal": z[meta["physical"]].tolist() if "physical" in meta else z.tolist(),
        "full_primal": z.tolist(),
        "dual": sol.dual.tolist(),
    }
    text = json.dumps(doc)
    if cfg.output:
        Path(cfg.output).write_text(text + "\n", encoding="utf-8")
        print(json.dumps({"status": "ok", "output": cfg.output, "residual_norm": doc["residual_norm"]}))
    else:
        print(text)
    return 0


def cmd_gs(cfg: ExperimentConfig):
    qp, part, meta = _load_instance(cfg)
    lifted = _lift(cfg, qp, part, meta)
    oracle = oracle_state(lifted)
    variant = {"schedule": cfg.schedule} if cfg.schedule is not None else {}
    res, elapsed = _run_variant(cfg, qp, part, meta, lifted, oracle, variant)
    name = cfg.name or cfg.ordering
    times = None
    if cfg.timing:
        times = [elapsed * i / max(len(res.trace) - 1, 1) for i in range(len(res.trace))]
    status = "converged" if res.converged else "not_converged"
    _write_csv(cfg.output, _trace_rows(name, res.trace, times), [f"{name} status={status}"])
    if cfg.svg:
        write_svg(cfg.svg, {name: [(r.step, r.error_w) for r in res.trace]},
                  title=f"{cfg.case} coordination error", ylabel="||w - w*||")
    return 0


def cmd_spectrum(cfg: ExperimentConfig, orderings=None):
    qp, part, meta = _load_instance(cfg)
    lifted = _lift(cfg, qp, part, meta)
    certs = []
    for name in orderings or [cfg.ordering]:
        if name not in ORDERINGS:
            raise ConfigError(f"unknown ordering {name!r}")
        cert = certify(lifted, make_ordering(name, lifted, meta), seed=cfg.seed)
        doc = cert.to_dict()
        doc["ordering"] = name
        certs.append(doc)
    text = json.dumps({"certificates": certs}, sort_keys=True)
    if cfg.output:
        Path(cfg.output).write_text(text + "\n", encoding="utf-8")
    print(text)
    return 0


def _variant_name(v, i):
    if "name" in v:
        return str(v["name"])
    parts = [v.get("ordering", "default")]
    if v.get("schedule") is not None:
        parts.append("levels=" + "-".join(str(x) for x in v["schedule"].levels))
    if v.get("warm_start") == "coarse":
        parts.append("warm")
    return "/".join(parts) or f"variant{i}"


def cmd_experiment(cfg: ExperimentConfig):
    if not cfg.variants:
        raise ConfigError("experiment needs a nonempty 'variants' list")
    qp, part, meta = _load_instance(cfg)
    lifted = _lift(cfg, qp, part, meta)
    oracle = oracle_state(lifted)
    names = [_variant_name(v, i) for i, v in enumerate(cfg.variants)]

    def job(v):
        try:
            return _run_variant(cfg, qp, part, meta, lifted, oracle, v), None
        except (MgCoordError, KeyError, ValueError) as exc:
            return None, f"{type(exc).__name__}: {exc}"

    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as ex:
            outcomes = list(ex.map(job, cfg.variants))
    else:
        outcomes = [job(v) for v in cfg.variants]

    rows, footers, series = [], [], {}
    for name, (out, err) in zip(names, outcomes):
        if err is not None:
            footers.append(f"{name} status=failed error={err}")
            continue
        res, elapsed = out
        times = None
        if cfg.timing:
            times = [elapsed * i / max(len(res.trace) - 1, 1) for i in range(len(res.trace))]
        rows += _trace_rows(name, res.trace, times)
        footers.append(f"{name} status={'converged' if res.converged else 'not_converged'}")
        series[name] = [(r.step, r.error_w) for r in res.trace]
    _write_csv(cfg.output, rows, footers)
    if cfg.svg:
        write_svg(cfg.svg, series, title=f"{cfg.case} coordination error", ylabel="||w - w*||")
    return 0 if series else 1


def _parse_param(text):
    if "=" not in text:
        raise ConfigError(f"--param expects key=value, got {text!r}")
    key, val = text.split("=", 1)
    try:
        return key.strip(), json.loads(val)
    except json.JSONDecodeError:
        return key.strip(), val


def build_parser():
    parser = argparse.ArgumentParser(prog="mgcoord", description=__doc__.split("\n\n")[0].strip())
    sub = parser.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--case", choices=CASES)
    common.add_argument("--param", action="append", default=[], metavar="KEY=VALUE",
                        help="case parameter override (value parsed as JSON when possible)")
    common.add_argument("--problem", help="problem JSON for the custom-json case")
    common.add_argument("--ordering")
    common.add_argument("--tol", type=float)
    common.add_argument("--max-steps", type=int)
    common.add_argument("--warm-start", choices=("none", "coarse"))
    common.add_argument("--coarse-level", type=int)
    common.add_argument("--schedule", help="comma-separated coarse levels, e.g. 1,2,4,5")
    common.add_argument("--seed", type=int)
    common.add_argument("--output", "-o")
    common.add_argument("--svg")
    common.add_argument("--timing", action="store_true", default=None,
                        help="fill wall_time_ms (makes output run-dependent)")
    common.add_argument("--workers", type=int)
    sub.add_parser("solve", parents=[common], help="centralized solve")
    sub.add_parser("gs", parents=[common], help="coordination trace")
    sp_ = sub.add_parser("spectrum", parents=[common], help="convergence certificate")
    sp_.add_argument("--orderings", help="comma-separated list of orderings to certify")
    sub.add_parser("experiment", parents=[common], help="multi-variant comparison")
    return parser


_FLAG_FIELDS = ("case", "problem", "ordering", "tol", "max_steps", "warm_start", "coarse_level",
                "schedule", "seed", "output", "svg", "timing", "workers")


def load_config(args) -> ExperimentConfig:
    doc = {}
    if args.config:
        try:
            doc = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed config JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
    for name in _FLAG_FIELDS:
        val = getattr(args, name, None)
        if val is not None:
            doc[name] = val
    if args.param:
        params = dict(doc.get("params") or {})
        for text in args.param:
            k, v = _parse_param(text)
            params[k] = v
        doc["params"] = params
    return ExperimentConfig.from_dict(doc)


def _error(kind, exc, code):
    print(json.dumps({"error": kind, "type": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
    return code


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code else 0
    try:
        cfg = load_config(args)
        if args.command == "solve":
            return cmd_solve(cfg)
        if args.command == "gs":
            return cmd_gs(cfg)
        if args.command == "spectrum":
            names = args.orderings.split(",") if args.orderings else None
            return cmd_spectrum(cfg, names)
        return cmd_experiment(cfg)
    except (ConfigError, NonDivisor, MissingMetadata) as exc:
        return _error("config", exc, 2)
    except MgCoordError as exc:
        return _error("numerical", exc, 1)
    except np.linalg.LinAlgError as exc:
        return _error("numerical", exc, 1)


if __name__ == "__main__":
    sys.exit(main())
