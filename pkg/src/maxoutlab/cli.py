"""Command-line entry point: ``maxoutlab <subcommand> --config cfg.json --out path``.

Structural settings live in a JSON config validated against a fixed schema;
flags cover only paths, the seed and a few scalars. Exit status is 0 on
success, 1 when a check fails and 2 for configuration or input errors.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import sys
import tempfile
from pathlib import Path
from typing import Optional, Sequence

import jsonschema
import numpy as np

from . import __version__
from . import estimators as est
from . import theory
from .network import Architecture, InitScheme, init_params
from .order_stats import constants_table, recommended_c

EXIT_OK, EXIT_CHECK_FAILED, EXIT_CONFIG = 0, 1, 2

_VECTOR = {"oneOf": [{"type": "array", "items": {"type": "number"}, "minItems": 1},
                     {"enum": ["random", "aligned", "e1"]}]}

CONFIG_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "architecture": {
            "type": "object",
            "additionalProperties": False,
            "required": ["n0", "nL"],
            "properties": {
                "n0": {"type": "integer", "minimum": 1},
                "widths": {"type": "array", "items": {"type": "integer", "minimum": 1}},
                "nL": {"type": "integer", "minimum": 1},
                "K": {"type": "integer", "minimum": 1},
                "activation": {"enum": ["maxout", "relu"]},
                "bias_mode": {"enum": ["gaussian", "zero"]},
            },
        },
        "scheme": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "c": {"oneOf": [{"type": "number", "exclusiveMinimum": 0},
                                {"const": "recommended"}]},
                "bias_mode": {"enum": ["gaussian", "zero"]},
                "seed": {"type": "integer", "minimum": 0},
            },
        },
        "estimator": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "n_samples": {"type": "integer", "minimum": 2},
                "seed": {"type": "integer", "minimum": 0},
                "t_max": {"type": "integer", "minimum": 1},
                "t": {"type": "integer", "minimum": 1},
                "alpha": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "x": _VECTOR,
                "u": _VECTOR,
                "lprime": {"type": "integer", "minimum": 0},
                "a": {"type": "array", "items": {"type": "number"}},
                "b": {"type": "array", "items": {"type": "number"}},
                "n_points": {"type": "integer", "minimum": 2},
                "resolution": {"type": "integer", "minimum": 2},
                "refine_tol": {"type": "number", "exclusiveMinimum": 0},
                "oracle_factor": {"type": "integer", "minimum": 1},
                "n_nets": {"type": "integer", "minimum": 1},
                "augment": {"type": "boolean"},
            },
        },
        "training": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "dataset": {"oneOf": [{"type": "string"}, {"type": "object"}]},
                "split": {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3},
                "optimizer": {
                    "type": "object",
                    "additionalProperties": False,
                    "properties": {
                        "name": {"enum": ["sgd_nesterov", "adam"]},
                        "momentum": {"type": "number", "minimum": 0},
                        "beta1": {"type": "number", "minimum": 0, "maximum": 1},
                        "beta2": {"type": "number", "minimum": 0, "maximum": 1},
                        "eps": {"type": "number", "minimum": 0},
                    },
                },
                "learning_rate": {"type": "number", "minimum": 0},
                "lr_halving_period_epochs": {"type": ["integer", "null"], "minimum": 1},
                "epochs": {"type": "integer", "minimum": 0},
                "batch_size": {"type": "integer", "minimum": 1},
                "n_runs": {"type": "integer", "minimum": 1},
                "schemes": {
                    "type": "array",
                    "items": {
                        "type": "object",
                        "additionalProperties": False,
                        "required": ["name", "c"],
                        "properties": {
                            "name": {"type": "string"},
                            "c": {"oneOf": [{"type": "number", "exclusiveMinimum": 0},
                                            {"const": "recommended"}]},
                            "activation": {"enum": ["maxout", "relu"]},
                            "learning_rate": {"type": "number", "minimum": 0},
                        },
                    },
                },
            },
        },
        "io": {
            "type": "object",
            "additionalProperties": False,
            "properties": {"out": {"type": "string"}, "summary": {"type": "string"}},
        },
    },
}


class ConfigError(Exception):
    pass


# output ---------------------------------------------------------------------

def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    if isinstance(v, (list, tuple, dict)):
        return json.dumps(v, default=_json_default)
    if v is None:
        return ""
    return str(v)


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o).__name__}")


def _atomic_write(path, text: str) -> None:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
        try:
            with os.fdopen(fd, "w", newline="") as fh:
                fh.write(text)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
    except OSError as e:
        raise OSError(f"cannot write {path}: {e.strerror or e}") from e


def write_report(records: Sequence[dict], path, format: str = "csv",
                 meta: Optional[dict] = None, columns: Optional[Sequence[str]] = None) -> None:
    """Write homogeneous records as CSV (``#`` metadata lines, header, rows) or JSON."""
    meta = dict(meta or {})
    if format == "json":
        payload = {**meta, "records": list(records)}
        _atomic_write(path, json.dumps(payload, indent=2, default=_json_default) + "\n")
        return
    if format != "csv":
        raise ValueError(f"format must be 'csv' or 'json', got {format!r}")
    cols = list(columns) if columns is not None else (list(records[0]) if records else [])
    for i, r in enumerate(records):
        if set(r) != set(cols):
            raise ValueError(f"record {i} has fields {sorted(r)}, expected {sorted(cols)}")
    buf = io.StringIO()
    for k, v in meta.items():
        buf.write(f"# {k}={_fmt(v)}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in records:
        w.writerow([_fmt(r[c]) for c in cols])
    _atomic_write(path, buf.getvalue())


def _parse_cell(s: str):
    if s == "":
        return None
    if s in ("true", "false"):
        return s == "true"
    try:
        return int(s)
    except ValueError:
        pass
    try:
        return float(s)
    except ValueError:
        pass
    if s[:1] in "[{":
        try:
            return json.loads(s)
        except ValueError:
            pass
    return s


def read_csv(path) -> tuple[list[dict], dict]:
    """Read a file written by :func:`write_report`; returns ``(records, meta)``."""
    meta, lines = {}, []
    with open(path, newline="") as fh:
        for line in fh:
            if line.startswith("# ") and not lines:
                k, _, v = line[2:].rstrip("\n").partition("=")
                meta[k] = _parse_cell(v)
            else:
                lines.append(line)
    rows = list(csv.reader(lines))
    if not rows:
        return [], meta
    header = rows[0]
    return [dict(zip(header, map(_parse_cell, r))) for r in rows[1:]], meta


# config ---------------------------------------------------------------------

def load_config(path) -> dict:
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror or e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"malformed JSON in {path}: {e}") from e
    try:
        jsonschema.validate(cfg, CONFIG_SCHEMA)
    except jsonschema.ValidationError as e:
        where = "/".join(map(str, e.absolute_path)) or "<root>"
        raise ConfigError(f"config {path} invalid at {where}: {e.message}") from e
    return cfg


def config_hash(cfg: dict) -> str:
    canon = json.dumps(cfg, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def _arch(cfg: dict) -> Architecture:
    if "architecture" not in cfg:
        raise ConfigError("config needs an 'architecture' block")
    try:
        return Architecture.from_dict(cfg["architecture"])
    except ValueError as e:
        raise ConfigError(str(e)) from e


def _c_value(c, K: int) -> float:
    return recommended_c(K) if c == "recommended" else float(c)


def _scheme(cfg: dict, arch: Architecture, seed: int) -> InitScheme:
    s = cfg.get("scheme", {})
    return InitScheme(_c_value(s.get("c", "recommended"), arch.K), s.get("bias_mode"), seed)


def _effective(arch: Architecture, scheme: InitScheme) -> Architecture:
    """The architecture with the scheme's bias mode, when the scheme sets one."""
    if scheme.bias_mode is None:
        return arch
    return Architecture.from_dict({**arch.to_dict(), "bias_mode": scheme.bias_mode})


def _vector(spec, n: int, rng: np.random.Generator, like=None) -> np.ndarray:
    if spec == "random":
        v = rng.standard_normal(n)
        return v / np.linalg.norm(v)
    if spec == "aligned":
        if like is None:
            raise ConfigError("'aligned' is only valid for the direction u")
        return like / np.linalg.norm(like)
    if spec == "e1":
        v = np.zeros(n)
        v[0] = 1.0
        return v
    v = np.asarray(spec, dtype=np.float64)
    if v.shape != (n,):
        raise ConfigError(f"vector has length {v.size}, expected {n}")
    return v


def _x_u(cfg: dict, arch: Architecture, seed: int, unit_u: bool = True):
    e = cfg.get("estimator", {})
    rng = est.substream(seed, 0, 0)
    x = _vector(e.get("x", "random"), arch.n0, rng)
    u = _vector(e.get("u", "random"), arch.n0, rng, like=x)
    if unit_u:
        norm = np.linalg.norm(u)
        if norm == 0:
            raise ConfigError("direction u must be nonzero")
        u = u / norm
    return x, u


# subcommands ----------------------------------------------------------------

def _cmd_constants(args, cfg, seed):
    rows = constants_table(args.k_min, args.k_max)
    return rows, {}, True


def _cmd_bounds(args, cfg, seed):
    arch = _arch(cfg)
    scheme = _scheme(cfg, arch, seed)
    arch, c = _effective(arch, scheme), scheme.c
    e = cfg.get("estimator", {})
    t = e.get("t", 1)
    x, _ = _x_u(cfg, arch, seed)
    reports = [theory.jacobian_moment_bounds(arch, c, t).to_dict(),
               theory.curve_length_bounds(arch, c, t).to_dict()]
    for lp in range(1, arch.depth):
        reports.append(theory.activation_length_stats(arch, c, x, lp, t).to_dict())
    try:
        reports.append(theory.ntk_bounds(arch, c, x, e.get("augment", True)).to_dict())
    except theory.BoundPreconditionError:
        pass
    extra = {"wide_deep_mean": theory.wide_deep_mean(arch),
             "c_grad": theory.c_grad_bound(arch, c, t),
             "architecture_check": theory.architecture_check(arch, c).to_dict()}
    return reports, extra, True


def _cmd_verify_jacobian(args, cfg, seed):
    arch = _arch(cfg)
    scheme = _scheme(cfg, arch, seed)
    e = cfg.get("estimator", {})
    x, u = _x_u(cfg, arch, seed)
    m = est.mc_jacobian_moments(arch, scheme, x, u, e.get("t_max", 2), e.get("n_samples", 1000), seed)
    b = theory.jacobian_moment_bounds(arch, scheme.c)
    in_bounds = b.lower <= m.mean <= b.upper
    target = theory.wide_deep_mean(arch)
    summary = {"in_bounds": in_bounds, "lower": b.lower, "upper": b.upper,
               "wide_deep_mean": target,
               "within_3se_of_wide_deep_mean": abs(m.mean - target) <= 3 * m.stderr_mean,
               **m.to_dict()}
    return [m.to_dict()], summary, in_bounds


def _cmd_verify_order(args, cfg, seed):
    arch = _arch(cfg)
    scheme = _scheme(cfg, arch, seed)
    e = cfg.get("estimator", {})
    x, u = _x_u(cfg, arch, seed)
    r = est.stochastic_order_test(arch, scheme, x, u, e.get("n_samples", 10_000),
                                  e.get("alpha", 0.01), seed)
    return [r.to_dict()], r.to_dict(), r.passed


def _cmd_verify_eqdist(args, cfg, seed):
    arch = _arch(cfg)
    scheme = _scheme(cfg, arch, seed)
    e = cfg.get("estimator", {})
    x, u = _x_u(cfg, arch, seed)
    r = est.eq_in_distribution_check(arch, scheme, x, u, e.get("n_samples", 10_000), seed,
                                     e.get("alpha", 0.01))
    return [r.to_dict()], r.to_dict(), r.passed


def _cmd_cosine(args, cfg, seed):
    arch = _arch(cfg)
    scheme = _scheme(cfg, arch, seed)
    e = cfg.get("estimator", {})
    x, u = _x_u(cfg, arch, seed)
    tr = est.cosine_trajectory(arch, scheme, x, u, e.get("n_samples", 200), seed)
    summary = {"final_mean_abs_cos": float(tr.mean_abs_cos[-1]), "n_inits": tr.n_inits}
    return tr.records(), summary, True


def _cmd_verify_actlen(args, cfg, seed):
    arch = _arch(cfg)
    scheme = _scheme(cfg, arch, seed)
    e = cfg.get("estimator", {})
    x, _ = _x_u(cfg, arch, seed)
    ests = est.mc_activation_length_all(arch, scheme, x, e.get("t_max", 2),
                                        e.get("n_samples", 10_000), seed)
    rows, ok = [], True
    a = _effective(arch, scheme)
    for lp, m in enumerate(ests, 1):
        exact = theory.activation_length_stats(a, scheme.c, x, lp).exact
        within = abs(m.mean - exact) <= 3 * m.stderr_mean
        ok &= within
        rows.append({"layer": lp, "exact_mean": exact, "within_3se": within, **m.to_dict()})
    return rows, {"passed": ok}, ok


def _cmd_curve(args, cfg, seed):
    arch = _arch(cfg)
    scheme = _scheme(cfg, arch, seed)
    e = cfg.get("estimator", {})
    a = np.asarray(e.get("a", np.zeros(arch.n0)), dtype=np.float64)
    if "b" in e:
        b = np.asarray(e["b"], dtype=np.float64)
    else:
        b = a + _vector("random", arch.n0, est.substream(seed, 0, 0))
    if a.shape != (arch.n0,) or b.shape != (arch.n0,):
        raise ConfigError(f"segment endpoints must have length n0 = {arch.n0}")
    curve = est.straight_segment(a, b, e.get("n_points", 1000))
    m = est.mc_curve_length(arch, scheme, curve, e.get("n_samples", 1000), seed)
    bound = theory.curve_length_bounds(arch, scheme.c).upper
    ok = m.mean <= bound + 3 * m.stderr_mean
    return [m.to_dict()], {"mean_bound": bound, "passed": ok, **m.to_dict()}, ok


def _cmd_regions(args, cfg, seed):
    arch = _arch(cfg)
    scheme = _scheme(cfg, arch, seed)
    e = cfg.get("estimator", {})
    res = e.get("resolution", 10_000)
    factor = e.get("oracle_factor")
    rows, ok = [], True
    for i in range(e.get("n_nets", 1)):
        rng = est.substream(seed, 10, i)
        params = init_params(arch, scheme, rng)
        a = _vector(e["a"], arch.n0, rng) if "a" in e else rng.standard_normal(arch.n0)
        b = _vector(e["b"], arch.n0, rng) if "b" in e else rng.standard_normal(arch.n0)
        rc = est.count_regions_1d(params, a, b, res, e.get("refine_tol", 1e-10))
        row = {"net": i, "region_count": rc.region_count, "oracle_count": None,
               "one_layer_bound": None}
        if factor:
            row["oracle_count"] = est.dense_grid_region_count(params, a, b, res * factor)
            ok &= row["oracle_count"] == rc.region_count
        if arch.depth == 2 and arch.activation == "maxout":
            row["one_layer_bound"] = arch.widths[0] * (arch.K - 1) + 1
            ok &= rc.region_count <= row["one_layer_bound"]
        rows.append(row)
    return rows, {"passed": ok}, ok


def _cmd_ntk(args, cfg, seed):
    arch = _arch(cfg)
    scheme = _scheme(cfg, arch, seed)
    e = cfg.get("estimator", {})
    x, _ = _x_u(cfg, arch, seed)
    try:
        b = theory.ntk_bounds(_effective(arch, scheme), scheme.c, x, e.get("augment", True))
    except theory.BoundPreconditionError as err:
        raise ConfigError(str(err)) from err
    m = est.mc_ntk_diag(arch, scheme, x, e.get("n_samples", 10_000), seed)
    mean_ok = b.lower - 3 * m.stderr_mean <= m.mean <= b.upper + 3 * m.stderr_mean
    second_ok = m.higher_moments[2] <= b.variance_upper
    summary = {"lower": b.lower, "upper": b.upper, "second_moment_bound": b.variance_upper,
               "mean_in_bounds": mean_ok, "second_moment_ok": second_ok, **m.to_dict()}
    return [m.to_dict()], summary, mean_ok and second_ok


def _training_block(cfg):
    from .training import OptimizerConfig

    t = cfg.get("training", {})
    opt = OptimizerConfig(**t.get("optimizer", {}))
    return t, opt


def _dataset(args, t, seed):
    from .training import DatasetError, load_dataset

    source = args.data or t.get("dataset")
    if source is None:
        raise ConfigError("no dataset given (use --data or training.dataset)")
    if isinstance(source, str) and source != "iris" and not Path(source).is_file():
        raise ConfigError(f"dataset not found: {source}")
    try:
        return load_dataset(source, t.get("split", (0.6, 0.2, 0.2)), seed)
    except DatasetError as e:
        raise ConfigError(str(e)) from e


def _cmd_train(args, cfg, seed):
    from .training import TrainConfig, train

    arch = _arch(cfg)
    t, opt = _training_block(cfg)
    data = _dataset(args, t, seed)
    tc = TrainConfig(arch, _scheme(cfg, arch, seed), opt, t.get("learning_rate", 0.01),
                     t.get("lr_halving_period_epochs", 100), t.get("epochs", 500),
                     t.get("batch_size", 32), seed)
    res = train(tc, data)
    out = res.to_dict()
    out.pop("wall_time")
    return [out], {"wall_time": res.wall_time, "diverged": res.diverged}, True


def _cmd_compare(args, cfg, seed):
    from .training import SchemeSpec, compare_inits

    arch = _arch(cfg)
    t, opt = _training_block(cfg)
    data = _dataset(args, t, seed)
    specs = [SchemeSpec(s["name"], _c_value(s["c"], arch.K), s.get("activation", "maxout"),
                        s.get("learning_rate")) for s in t.get("schemes", [])]
    if len(specs) < 2:
        raise ConfigError("compare needs at least two schemes in training.schemes")
    table = compare_inits(data, arch, specs, opt, t.get("n_runs", 4), seed,
                          t.get("learning_rate", 0.01), t.get("lr_halving_period_epochs", 100),
                          t.get("epochs", 500), t.get("batch_size", 32))
    rows = [{k: r[k] for k in ("scheme", "c", "mean_acc", "std_acc", "n_runs")} for r in table]
    return rows, {"accuracies": {r["scheme"]: r["accuracies"] for r in table}}, True


COMMANDS = {
    "constants": _cmd_constants,
    "bounds": _cmd_bounds,
    "verify-jacobian": _cmd_verify_jacobian,
    "verify-order": _cmd_verify_order,
    "verify-eqdist": _cmd_verify_eqdist,
    "cosine": _cmd_cosine,
    "verify-actlen": _cmd_verify_actlen,
    "curve": _cmd_curve,
    "regions": _cmd_regions,
    "ntk": _cmd_ntk,
    "train": _cmd_train,
    "compare": _cmd_compare,
}

# default output format per subcommand when the path has no telling suffix
_JSON_PRIMARY = {"bounds", "train"}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="maxoutlab", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", help="JSON experiment config")
        sp.add_argument("--out", help="primary output path (.csv or .json)")
        sp.add_argument("--seed", type=int, help="master seed; overrides the config")
        if name == "constants":
            sp.add_argument("--k-min", type=int, default=2)
            sp.add_argument("--k-max", type=int, default=10)
        if name in ("train", "compare"):
            sp.add_argument("--data", help="dataset CSV path or 'iris'")
    return p


def run(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code else EXIT_OK
    try:
        cfg = load_config(args.config) if args.config else {}
        if args.command != "constants" and not args.config:
            raise ConfigError(f"{args.command} requires --config")
        seed = args.seed
        if seed is None:
            seed = cfg.get("estimator", {}).get("seed", cfg.get("scheme", {}).get("seed", 0))
        if args.command == "constants":
            from .order_stats import K_MAX, K_MIN
            if not K_MIN <= args.k_min <= args.k_max <= K_MAX:
                raise ConfigError(f"need {K_MIN} <= k-min <= k-max <= {K_MAX}")
        out = args.out or cfg.get("io", {}).get("out")
        chash = config_hash({**cfg, "_command": args.command, "_seed": seed,
                             **({"_k": [args.k_min, args.k_max]} if args.command == "constants" else {})})
        records, summary, passed = COMMANDS[args.command](args, cfg, seed)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG

    meta = {"version": __version__, "command": args.command, "master_seed": seed,
            "config_hash": chash}
    if out is None:
        w = csv.writer(sys.stdout, lineterminator="\n")
        if records:
            cols = list(records[0])
            w.writerow(cols)
            for r in records:
                w.writerow([_fmt(r[c]) for c in cols])
    else:
        fmt = "json" if out.endswith(".json") or (
            args.command in _JSON_PRIMARY and not out.endswith(".csv")) else "csv"
        try:
            write_report(records, out, fmt, {**meta, "config": cfg} if fmt == "json" else meta)
            if args.command != "constants":
                spath = cfg.get("io", {}).get("summary") or str(Path(out).with_suffix(".summary.json"))
                body = {**meta, "config": cfg, "passed": bool(passed), **summary}
                _atomic_write(spath, json.dumps(body, indent=2, default=_json_default) + "\n")
        except OSError as e:
            print(f"error: {e}", file=sys.stderr)
            return EXIT_CONFIG
    status = "PASS" if passed else "FAIL"
    print(f"{args.command}: {status}", file=sys.stderr)
    return EXIT_OK if passed else EXIT_CHECK_FAILED


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
