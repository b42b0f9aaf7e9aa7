"""Command-line entry point: ``fedbandit run|sweep|check-instance|dp-audit``.

Experiments are described by a JSON file::

    {
      "instance": {"kind": "DiverseMargin", "d": 4, "num_arms": 8, "num_clients": 20, "seed": 1},
      "algorithm": "Robin",
      "T": 4096,
      "privacy": {"epsilon": 1.0, "delta": 1e-5},
      "beta": 0.05,
      "seed": 7,
      "overrides": {"U": 6},
      "out": "results/run1",
      "sweep": {"axis": "epsilon", "values": [0.5, 1, 2], "seeds": [0, 1, 2]}
    }

``instance`` is either a generator description or a path to a saved
instance (relative paths resolve against the config file's directory).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import os
import sys
from pathlib import Path

import jsonschema

from . import audit, envmod, simkit
from .dpmech import PrivacyParams
from .errors import ConfigError
from .numkit import RngStream

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_FAIL = 0, 2, 3, 4

_GENERATOR_SCHEMA = {
    "type": "object",
    "properties": {
        "kind": {"enum": list(envmod.KINDS)},
        "d": {"type": "integer", "minimum": 1},
        "num_arms": {"type": "integer", "minimum": 2},
        "num_clients": {"type": "integer", "minimum": 1},
        "seed": {"type": "integer", "minimum": 0},
        "gap_floor": {"type": "number", "minimum": 0},
        "sphere_radius": {"type": "number", "exclusiveMinimum": 0},
    },
    "required": ["kind", "num_clients"],
    "additionalProperties": False,
}

CONFIG_SCHEMA = {
    "type": "object",
    "properties": {
        "instance": {"oneOf": [{"type": "string"}, _GENERATOR_SCHEMA]},
        "algorithm": {"enum": list(simkit.ALGORITHMS)},
        "T": {"type": "integer", "minimum": 2},
        "M": {"type": "integer", "minimum": 1},
        "d": {"type": "integer", "minimum": 1},
        "privacy": {
            "type": "object",
            "properties": {
                "epsilon": {"type": "number", "exclusiveMinimum": 0},
                "delta": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
            },
            "required": ["epsilon", "delta"],
            "additionalProperties": False,
        },
        "beta": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
        "seed": {"type": "integer", "minimum": 0, "maximum": 2**64 - 1},
        "overrides": {
            "type": "object",
            "properties": {
                "U": {"type": "integer", "minimum": 1},
                "alpha": {"type": "number", "exclusiveMinimum": 0},
                "lambda0": {"type": "number", "exclusiveMinimum": 0},
            },
            "additionalProperties": False,
        },
        "rtol": {"type": "number", "exclusiveMinimum": 0},
        "out": {"type": "string"},
        "sweep": {
            "type": "object",
            "properties": {
                "axis": {"enum": list(simkit.AXES)},
                "values": {"type": "array", "minItems": 1, "items": {"type": "number"}},
                "seeds": {"type": "array", "minItems": 1, "items": {"type": "integer", "minimum": 0}},
            },
            "required": ["axis", "values", "seeds"],
            "additionalProperties": False,
        },
    },
    "required": ["instance", "T", "privacy"],
    "additionalProperties": False,
}


def _err(msg: str) -> None:
    print(f"fedbandit: {msg}", file=sys.stderr)


def load_config(path) -> dict:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    try:
        jsonschema.validate(doc, CONFIG_SCHEMA)
    except jsonschema.ValidationError as exc:
        where = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ConfigError(f"invalid config at {where}: {exc.message}") from exc
    return doc


def config_hash(doc: dict) -> str:
    """sha256 of the canonical JSON config; the output location is not part of the experiment."""
    body = {k: v for k, v in doc.items() if k != "out"}
    return hashlib.sha256(json.dumps(body, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def _resolve_instance(ref, base_dir: Path) -> tuple[envmod.Instance, dict | None]:
    if isinstance(ref, str):
        p = Path(ref)
        if not p.is_absolute():
            p = base_dir / p
        try:
            return envmod.Instance.load(p), None
        except FileNotFoundError as exc:
            raise ConfigError(f"instance file not found: {p}") from exc
        except (ValueError, KeyError, TypeError) as exc:
            raise ConfigError(f"bad instance file {p}: {exc}") from exc
    try:
        return envmod.generate_instance(ref), dict(ref)
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"bad instance spec: {exc}") from exc


def build_run_config(doc: dict, base_dir: Path) -> simkit.RunConfig:
    inst, spec = _resolve_instance(doc["instance"], base_dir)
    ov = doc.get("overrides", {})
    try:
        privacy = PrivacyParams(doc["privacy"]["epsilon"], doc["privacy"]["delta"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    cfg = simkit.RunConfig(
        instance=inst,
        algorithm=doc.get("algorithm", "Robin"),
        T=doc["T"],
        privacy=privacy,
        beta=doc.get("beta", 0.05),
        seed=doc.get("seed", 0),
        U=ov.get("U"),
        alpha=ov.get("alpha"),
        lambda0=ov.get("lambda0"),
        M=doc.get("M"),
        d=doc.get("d"),
        rtol=doc.get("rtol", 1e-10),
        instance_spec=spec,
    )
    cfg.validate()
    return cfg


def _regime_warning(cfg: simkit.RunConfig) -> None:
    if cfg.algorithm != "Robin":
        return
    inst = cfg.instance
    need = math.sqrt(inst.d) * math.log2(cfg.T) ** 1.5 / inst.num_clients
    if cfg.privacy.epsilon < need:
        _err(
            f"warning: epsilon={cfg.privacy.epsilon:g} is below sqrt(d)*log2(T)^1.5/M={need:.3g}; "
            "the regret guarantee does not cover this regime"
        )


def _instance_estimates(cfg: simkit.RunConfig) -> dict:
    inst = cfg.instance
    if inst.lambda0 is not None and inst.C0 is not None:
        return {"lambda0": inst.lambda0, "C0": inst.C0, "source": "instance metadata"}
    rep = envmod.instance_report(inst, 20_000, RngStream(cfg.seed).child("instance-report"))
    return {"lambda0": rep["lambda0"], "C0": rep["C0"], "source": "monte carlo (20000 samples per client)"}


def summary_dict(cfg: simkit.RunConfig, res: simkit.RunResult, digest: str) -> dict:
    last = res.phases[-1]
    return {
        "provenance": {"config_sha256": digest, "seed": cfg.seed},
        "algorithm": cfg.algorithm,
        "T": cfg.T,
        "M": cfg.instance.num_clients,
        "d": cfg.instance.d,
        "epsilon": cfg.privacy.epsilon,
        "delta": cfg.privacy.delta,
        "final_regret": res.final_regret,
        "regret_log2t_slope_last4": res.log_slope(4),
        "estimates": _instance_estimates(cfg),
        "P": res.P,
        "U": res.U,
        "alpha": res.alpha,
        "c1": res.c1,
        "eps0": res.eps0,
        "delta0": res.delta0,
        "eps_spent": last.eps_spent,
        "delta_spent": last.delta_spent,
    }


def write_outputs(out: Path, cfg: simkit.RunConfig, res: simkit.RunResult, digest: str) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    header = f"# config_sha256={digest} seed={cfg.seed}"
    (out / "rounds.csv").write_text(simkit.rounds_csv(res, header))
    (out / "phases.csv").write_text(simkit.phases_csv(res, header))
    summary = summary_dict(cfg, res, digest)
    (out / "summary.json").write_text(json.dumps(_json_safe(summary), indent=2, sort_keys=True) + "\n")
    return summary


def _json_safe(obj):
    # inf/nan are not valid JSON; spell them as strings
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, float) and not math.isfinite(obj):
        return str(obj)
    return obj


def _prepare(args) -> tuple[dict, simkit.RunConfig, Path, str]:
    if not args.config:
        raise ConfigError("--config is required")
    doc = load_config(args.config)
    if args.seed is not None:
        doc["seed"] = args.seed
    if args.out is not None:
        doc["out"] = args.out
    if "out" not in doc:
        raise ConfigError("no output directory: set 'out' in the config or pass --out")
    cfg = build_run_config(doc, Path(args.config).resolve().parent)
    out = Path(doc["out"])
    if not out.is_absolute() and args.out is None:
        out = Path(args.config).resolve().parent / out
    return doc, cfg, out, config_hash(doc)


def cmd_run(args) -> int:
    doc, cfg, out, digest = _prepare(args)
    _regime_warning(cfg)
    res = simkit.run_episode(cfg)
    summary = write_outputs(out, cfg, res, digest)
    print(f"final regret {summary['final_regret']:.6g} over T={cfg.T}, M={cfg.instance.num_clients}; wrote {out}")
    return EXIT_OK


def cmd_sweep(args) -> int:
    doc, cfg, out, digest = _prepare(args)
    if "sweep" not in doc:
        raise ConfigError("config has no 'sweep' section")
    sw = doc["sweep"]
    axis = sw["axis"]
    _regime_warning(cfg)
    jobs = args.jobs if args.jobs is not None else (os.cpu_count() or 1)
    cells = simkit.sweep(cfg, axis, sw["values"], sw["seeds"], jobs=jobs)
    buf = io.StringIO()
    buf.write(f"# config_sha256={digest} seed={cfg.seed}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([axis, "seed", "final_regret", "regret_log2t_slope_last4", "eps_spent", "delta_spent"])
    for cell in cells:
        value, seed, res = cell.value, cell.seed, cell.result
        write_outputs(out / f"{axis}={value}" / f"seed={seed}", cell.config, res, digest)
        last = res.phases[-1]
        w.writerow([value, seed, repr(res.final_regret), repr(res.log_slope(4)), repr(last.eps_spent), repr(last.delta_spent)])
    (out / "sweep.csv").write_text(buf.getvalue())
    print(f"{len(cells)} cells written under {out}")
    return EXIT_OK


def cmd_check_instance(args) -> int:
    if args.instance:
        inst, _ = _resolve_instance(args.instance, Path.cwd())
    elif args.config:
        doc = load_config(args.config)
        inst, _ = _resolve_instance(doc["instance"], Path(args.config).resolve().parent)
    else:
        raise ConfigError("give an instance path or --config")
    seed = args.seed if args.seed is not None else 0
    rep = envmod.instance_report(inst, args.samples, RngStream(seed).child("check-instance"))
    lo, hi = rep["lambda0_band"]
    clo, chi = rep["C0_band"]
    print(f"kind      {inst.kind}  (d={inst.d}, K={inst.num_arms}, M={inst.num_clients})")
    print(f"lambda0   {rep['lambda0']:.6g}  band [{lo:.6g}, {hi:.6g}]")
    print(f"C0        {rep['C0']:.6g}  band [{clo:.6g}, {chi:.6g}]")
    if rep["lambda0"] > 0:
        print("diversity condition: ok")
        return EXIT_OK
    print("diversity condition: FAILED (lambda0 estimate is not positive)")
    return EXIT_FAIL


def cmd_dp_audit(args) -> int:
    seed = args.seed if args.seed is not None else 0
    res = audit.run_dp_audit(args.mech, args.eps, args.samples, M=args.M, seed=seed)
    print(f"mechanism           {args.mech}")
    print(f"epsilon             {args.eps:g}")
    print(f"max |log ratio|     {res.max_log_ratio:.6g}")
    print(f"slack at that bin   {res.slack_at_max:.6g}")
    print(f"worst bin margin    {res.worst_margin:.6g}")
    print("audit: " + ("pass" if res.passed else "FAIL"))
    return EXIT_OK if res.passed else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="fedbandit", description="Federated linear contextual bandits with user-level DP.")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config_required=True):
        p.add_argument("--config", metavar="PATH", required=config_required, help="experiment JSON file")
        p.add_argument("--seed", type=int, metavar="U64", help="override the config seed")

    p = sub.add_parser("run", help="run one episode")
    common(p)
    p.add_argument("--out", metavar="DIR", help="output directory (overrides the config)")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run a factorial sweep")
    common(p)
    p.add_argument("--out", metavar="DIR", help="output directory (overrides the config)")
    p.add_argument("--jobs", type=int, metavar="N", help="worker processes (default: CPU count)")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("check-instance", help="estimate lambda0 and C0 for an instance")
    p.add_argument("instance", nargs="?", help="saved instance JSON")
    common(p, config_required=False)
    p.add_argument("--samples", type=int, default=100_000, metavar="N")
    p.set_defaults(func=cmd_check_instance)

    p = sub.add_parser("dp-audit", help="Monte-Carlo privacy audit of a 1-d mechanism")
    p.add_argument("mech", choices=sorted(audit.MECHANISMS))
    p.add_argument("--eps", type=float, default=1.0)
    p.add_argument("--samples", type=int, default=1_000_000, metavar="N")
    p.add_argument("--M", type=int, default=8, help="dataset size")
    p.add_argument("--seed", type=int, metavar="U64")
    p.set_defaults(func=cmd_dp_audit)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        _err(f"configuration error: {exc}")
        return EXIT_CONFIG
    except Exception as exc:  # anything past validation is a runtime failure
        _err(f"runtime error: {type(exc).__name__}: {exc}")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
