"""Command-line experiment runner.

Subcommands::

    hrmhmc run --config funnel.ini [--out DIR] [--seed 1,2] [--chains N] [--threads T]
    hrmhmc run --manifest DIR/meta.json --out DIR2
    hrmhmc figure funnel-energy-budget [--d 4] [--v-min -9] [--v-max 9] [--points 181]
    hrmhmc compare RUN_DIR_OR_CONFIG ... [--out table.csv]

Configuration files are INI documents with the sections ``[experiment]``,
``[model]``, ``[data]``, ``[sampler]`` and ``[adapt]``; see ``CONFIG_SCHEMA``
for every key and its default.  When neither ``--out`` nor ``output`` is set,
runs are written below ``$HRMHMC_OUTPUT_ROOT`` (default ``./runs``).
"""

from __future__ import annotations

import argparse
import configparser
import csv
import difflib
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from .diagnostics import format_table, write_table_csv
from .experiments import METHODS, MODEL_OPTIONS, MODELS
from .model import SYNTHETIC_DEFAULTS, ContractViolation, funnel_energy_budget
from .sampler import SamplerConfig, run_chain

__all__ = ["main", "ConfigError", "load_config", "CONFIG_SCHEMA", "OUTPUT_ROOT_ENV"]

OUTPUT_ROOT_ENV = "HRMHMC_OUTPUT_ROOT"
MODEL_ALIASES = {"gaussian-test": "gaussian"}
FIGURES = ("funnel-energy-budget",)


class ConfigError(ContractViolation):
    """Malformed or inconsistent experiment configuration."""


def _sampler_default(name):
    for f in fields(SamplerConfig):
        if f.name == name:
            return f.default
    raise KeyError(name)


_SAMPLER_KEYS = ("integrator", "flow_order", "uturn", "iterations", "burn_in",
                 "delta_max", "max_depth", "step_size", "hmc_steps",
                 "initial_variance", "thin", "trace_every")
_ADAPT_KEYS = ("n0", "kappa", "clip_quantile", "target_accept", "clipping",
               "mean_est", "adapt_metric", "adapt_step_size", "max_log_step")

CONFIG_SCHEMA: dict[str, dict[str, object]] = {
    "experiment": {"name": "funnel", "method": "block-exp", "output": None,
                   "seeds": "1", "data_seed": 0, "data_file": None},
    "model": {k: v for opts in MODEL_OPTIONS.values() for k, v in opts.items()},
    "data": {k: v for opts in SYNTHETIC_DEFAULTS.values() for k, v in opts.items()},
    "sampler": {k: _sampler_default(k) for k in _SAMPLER_KEYS},
    "adapt": {k: _sampler_default(k) for k in _ADAPT_KEYS},
}


def _key_lines(text: str) -> dict[tuple[str, str], int]:
    """Line number of every ``key = value`` entry, keyed by (section, key)."""
    out, section = {}, None
    for no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            continue
        for sep in ("=", ":"):
            if sep in line:
                out.setdefault((section, line.split(sep, 1)[0].strip()), no)
                break
    return out


def _suggest(word: str, options) -> str:
    close = difflib.get_close_matches(word, list(options), n=1, cutoff=0.6)
    return f"; did you mean {close[0]!r}?" if close else ""


def _parse_value(section: str, key: str, raw: str, where: str):
    raw = raw.strip()
    default = CONFIG_SCHEMA[section][key]
    try:
        if raw.lower() in ("none", ""):
            return None
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(raw)
        if key == "flow_order":
            return tuple(int(x) for x in raw.replace(",", " ").split())
        if key == "seeds":
            return [int(x) for x in raw.replace(",", " ").split()]
        if isinstance(default, int) and key not in ("step_size", "max_log_step"):
            return int(raw)
        if isinstance(default, float) or key in ("step_size", "max_log_step"):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {section}.{key} = {raw!r}") from None


def load_config(path: str | Path) -> tuple[SamplerConfig, dict]:
    """Parse an experiment file into a base ``SamplerConfig`` and run options.

    Run options hold ``output`` and ``seeds``.  Unknown sections and keys are
    rejected with their line number and a spelling suggestion.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keys are case-sensitive (e.g. "T")
    try:
        parser.read_string(text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    lines = _key_lines(text)
    values: dict[str, dict[str, object]] = {s: {} for s in CONFIG_SCHEMA}
    for section in parser.sections():
        if section not in CONFIG_SCHEMA:
            no = next((n for (s, _), n in lines.items() if s == section), "?")
            raise ConfigError(f"{path}:{no}: unknown section [{section}]"
                              f"{_suggest(section, CONFIG_SCHEMA)}")
        for key, raw in parser.items(section):
            where = f"{path}:{lines.get((section, key), '?')}"
            if key not in CONFIG_SCHEMA[section]:
                raise ConfigError(f"{where}: unknown key {key!r} in [{section}]"
                                  f"{_suggest(key, CONFIG_SCHEMA[section])}")
            values[section][key] = _parse_value(section, key, raw, where)

    exp = values["experiment"]
    name = exp.get("name", "funnel")
    model = MODEL_ALIASES.get(name, name)
    if model not in MODELS:
        raise ConfigError(f"{path}: unknown experiment {name!r}; expected one of "
                          f"{sorted(set(MODELS) | set(MODEL_ALIASES))}")
    method = exp.get("method", "block-exp")
    if method not in METHODS:
        raise ConfigError(f"{path}: unknown method {method!r}{_suggest(method, METHODS)}")
    model_opts = values["model"]
    bad = set(model_opts) - set(MODEL_OPTIONS[model])
    if bad:
        raise ConfigError(f"{path}: [model] keys {sorted(bad)} do not apply to {model}")
    data_opts = values["data"]
    bad = set(data_opts) - set(SYNTHETIC_DEFAULTS[model])
    if bad:
        raise ConfigError(f"{path}: [data] keys {sorted(bad)} do not apply to {model}")
    seeds = exp.get("seeds") or [1]
    kwargs = {**values["sampler"], **values["adapt"]}
    kwargs = {k: v for k, v in kwargs.items() if v is not None or k == "step_size"}
    try:
        base = SamplerConfig(model=model, method=method, model_options=model_opts,
                             data_options=data_opts,
                             data_seed=int(exp.get("data_seed") or 0),
                             data_file=exp.get("data_file"), seed=seeds[0], **kwargs)
    except (TypeError, ContractViolation) as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return base, {"output": exp.get("output"), "seeds": seeds}


def _run_one(config: SamplerConfig, out_dir: str) -> dict:
    result = run_chain(config)
    result.save(out_dir)
    return {"dir": out_dir, **result.summary_row()}


def _default_output(config: SamplerConfig) -> Path:
    root = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
    return root / f"{config.model}-{config.method}"


def _run_configs(configs: list[SamplerConfig], out: Path, threads: int) -> list[dict]:
    if len(configs) == 1:
        dirs = [out]
    else:
        dirs = [out / f"seed-{c.seed}" for c in configs]
    if threads > 1 and len(configs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(_run_one, configs, map(str, dirs)))
    else:
        rows = [_run_one(c, str(d)) for c, d in zip(configs, dirs)]
    return rows


def _seed_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.replace(",", " ").split()]
    except ValueError:
        raise ConfigError(f"invalid seed list {text!r}") from None


def cmd_run(args) -> int:
    if (args.config is None) == (args.manifest is None):
        raise ConfigError("run needs exactly one of --config or --manifest")
    if args.manifest is not None:
        try:
            manifest = json.loads(Path(args.manifest).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read manifest {args.manifest}: {exc}") from None
        base = SamplerConfig.from_dict(manifest["config"])
        options = {"output": None, "seeds": [base.seed]}
    else:
        base, options = load_config(args.config)
    seeds = options["seeds"]
    if args.seed is not None:
        seeds = _seed_list(args.seed)
    if args.chains is not None:
        if args.chains < 1:
            raise ConfigError("--chains must be at least 1")
        seeds = [seeds[0] + i for i in range(args.chains)]
    if len(set(seeds)) != len(seeds):
        raise ConfigError(f"duplicate seeds in {seeds}")
    out = Path(args.out or options["output"] or _default_output(base))
    configs = [replace(base, seed=s) for s in seeds]
    rows = _run_configs(configs, out, max(1, args.threads))
    table = [{"method": base.method, "seed": c.seed,
              **{k: v for k, v in r.items() if k not in ("dir", "method")}}
             for c, r in zip(configs, rows)]
    sys.stdout.write(format_table(table))
    return 0


def cmd_figure(args) -> int:
    if args.name not in FIGURES:
        raise ConfigError(f"unknown figure {args.name!r}{_suggest(args.name, FIGURES)}")
    if args.points < 2 or not args.v_max > args.v_min:
        raise ConfigError("need --points >= 2 and --v-max > --v-min")
    table = funnel_energy_budget(args.d, np.linspace(args.v_min, args.v_max, args.points))
    cols = list(table)
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.writer(fh)
        w.writerow(cols)
        for row in zip(*(table[c] for c in cols)):
            w.writerow([repr(float(x)) for x in row])
    finally:
        if args.out:
            fh.close()
    return 0


def _read_summary(run_dir: Path) -> list[dict]:
    direct = run_dir / "summary.csv"
    if direct.is_file():
        paths = [direct]
    else:
        paths = sorted(run_dir.glob("*/summary.csv"))
        if not paths:
            raise ConfigError(f"no run outputs (summary.csv) found in {run_dir}")
    rows = []
    for p in paths:
        with open(p, newline="") as fh:
            for r in csv.DictReader(fh):
                row = {"method": r.pop("method")}
                row.update({k: float(v) for k, v in r.items()})
                if p.parent != run_dir:
                    row["run"] = p.parent.name
                rows.append(row)
    return rows


def cmd_compare(args) -> int:
    rows = []
    for item in args.runs:
        path = Path(item)
        if path.suffix in (".ini", ".cfg") and path.is_file():
            base, options = load_config(path)
            out = Path(options["output"] or _default_output(base))
            configs = [replace(base, seed=s) for s in options["seeds"]]
            _run_configs(configs, out, max(1, args.threads))
            rows += _read_summary(out)
        elif path.is_dir():
            rows += _read_summary(path)
        else:
            raise ConfigError(f"run directory {item} does not exist")
    rows.sort(key=lambda r: r["method"])
    sys.stdout.write(format_table(rows))
    if args.out:
        write_table_csv(rows, args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hrmhmc",
                                     description="Hierarchical RMHMC experiment runner")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment configuration")
    run.add_argument("--config", help="INI experiment file")
    run.add_argument("--manifest", help="meta.json of an earlier run to repeat")
    run.add_argument("--out", help="output directory")
    run.add_argument("--seed", help="seed or comma-separated seed list")
    run.add_argument("--chains", type=int, help="number of chains from consecutive seeds")
    run.add_argument("--threads", type=int, default=1, help="worker processes for chains")
    run.set_defaults(func=cmd_run)

    fig = sub.add_parser("figure", help="emit data for a figure as CSV")
    fig.add_argument("name", help=f"one of {', '.join(FIGURES)}")
    fig.add_argument("--d", type=int, default=4)
    fig.add_argument("--v-min", type=float, default=-9.0)
    fig.add_argument("--v-max", type=float, default=9.0)
    fig.add_argument("--points", type=int, default=181)
    fig.add_argument("--out", help="CSV path (default: stdout)")
    fig.set_defaults(func=cmd_figure)

    cmp_ = sub.add_parser("compare", help="merge run summaries into one table")
    cmp_.add_argument("runs", nargs="+", help="run directories or INI files to run")
    cmp_.add_argument("--out", help="also write the table as CSV")
    cmp_.add_argument("--threads", type=int, default=1)
    cmp_.set_defaults(func=cmd_compare)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ContractViolation as exc:
        print(f"hrmhmc: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
