"""Command-line front end.

    samle <command> [--config FILE] [--seed S] [--threads K] [--out DIR] [--set key=value ...]

Configuration is a flat ``key = value`` file; ``--set`` and the dedicated
flags override file keys.  Every output file starts with ``#`` header lines
echoing the tool version, the full resolved configuration and the seed.
"""

from __future__ import annotations

import argparse
import configparser
import csv
import logging
import sys
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .bridge import BridgeFrame, ea_bridge_sampler
from .experiments import build_surface, derived_seed, run_nscaling, run_table2, surface_grid
from .mle import SimplexConfig, default_eps, profile, warm_start_ladder
from .models import ParameterBox, get_model
from .oracles import EulerConfig, ObservationSeries, simulate_dataset
from .rng import StreamKey
from .validation import CHECKS

logger = logging.getLogger("samle")

NON_RESULT_KEYS = frozenset({"threads", "record_timing"})

COMMANDS = ("simulate", "simulate-bridge", "estimate", "surface", "profile", "table2", "nscaling", "validate")

COMMON_DEFAULTS = {
    "experiment": "run",
    "seed": "1",
    "threads": "1",
    "out": ".",
    "substeps_log2": "8",
    "dt": "1.0",
    "N": "100",
    "scale": "0.1",
    "max_evals": "4000",
    "record_timing": "true",
    "R": "200",
    "ref_N": "10000",
    "replicates": "1",
}

MODEL_DEFAULTS = {
    "logistic": {
        "box": "0.03,0.18; 850,1200; 0.09,0.12",
        "theta0": "0.1,1000,0.1",
        "start": "0.05,1150,0.115",
        "v0": "700",
        "n": "1000",
    },
    "bm-drift": {
        "box": "-2,2",
        "theta0": "0.5",
        "start": "0",
        "v0": "0",
        "n": "100",
    },
}


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    values: dict[str, str]

    def get(self, key: str, default: str | None = None) -> str:
        if key in self.values:
            return self.values[key]
        if default is not None:
            return default
        raise ConfigError(f"missing config key {key!r}")

    def has(self, key: str) -> bool:
        return key in self.values and self.values[key] != ""

    def int(self, key: str) -> int:
        raw = self.get(key).strip()
        try:
            return int(raw)
        except ValueError:
            return int(float(raw))

    def float(self, key: str) -> float:
        return float(self.get(key))

    def bool(self, key: str) -> bool:
        v = self.get(key).strip().lower()
        if v in ("1", "true", "yes", "on"):
            return True
        if v in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{key}: expected a boolean, got {v!r}")

    def vector(self, key: str) -> np.ndarray:
        return np.array([float(x) for x in self.get(key).replace(";", ",").split(",") if x.strip()])

    def ints(self, key: str) -> list[int]:
        return [int(float(x)) for x in self.get(key).split(",") if x.strip()]

    def header(self) -> list[str]:
        # keys that cannot change any result are left out so reruns stay byte-identical
        return [f"config: {k} = {self.values[k]}" for k in sorted(self.values) if k not in NON_RESULT_KEYS]


def read_config_file(path) -> dict[str, str]:
    parser = configparser.ConfigParser(interpolation=None, delimiters=("=",), comment_prefixes=("#", ";"),
                                       inline_comment_prefixes=("#",))
    parser.optionxform = str  # keys are case sensitive (N vs n)
    text = Path(path).read_text()
    try:
        parser.read_string("[run]\n" + text, source=str(path))
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    return dict(parser["run"])


def resolve_config(args: argparse.Namespace) -> RunConfig:
    values = dict(COMMON_DEFAULTS)
    file_values = read_config_file(args.config) if args.config else {}
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    for flag in ("seed", "threads", "out"):
        if getattr(args, flag) is not None:
            overrides[flag] = str(getattr(args, flag))
    model = overrides.get("model", file_values.get("model", "logistic"))
    if model not in MODEL_DEFAULTS:
        raise ConfigError(f"unknown model {model!r}; known: {', '.join(MODEL_DEFAULTS)}")
    values.update(MODEL_DEFAULTS[model])
    values["model"] = model
    values.update(file_values)
    values.update(overrides)
    values["command"] = args.command
    return RunConfig(values)


# -- output -------------------------------------------------------------------


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


class Output:
    """Collects files and writes them with a common header at the end of the run."""

    def __init__(self, cfg: RunConfig):
        self.cfg = cfg
        self.dir = Path(cfg.get("out"))
        self.t0 = time.perf_counter()
        self.files: list[tuple[Path, list[str], list[str] | None, list]] = []

    def header(self, extra: list[str]) -> list[str]:
        lines = [f"samle {__version__}", f"command: {self.cfg.get('command')}", f"seed: {self.cfg.get('seed')}"]
        lines += extra
        lines += self.cfg.header()
        if self.cfg.bool("record_timing"):
            lines.append(f"wall_clock_seconds: {time.perf_counter() - self.t0:.3f}")
        return lines

    def csv(self, name: str, columns: list[str], rows, extra: list[str] | None = None) -> None:
        self.files.append((self.dir / name, extra or [], columns, list(rows)))

    def text(self, name: str, pairs: dict, extra: list[str] | None = None) -> None:
        self.files.append((self.dir / name, extra or [], None, list(pairs.items())))

    def flush(self) -> list[Path]:
        self.dir.mkdir(parents=True, exist_ok=True)
        written = []
        for path, extra, columns, rows in self.files:
            with open(path, "w", newline="") as fh:
                for line in self.header(extra):
                    fh.write(f"# {line}\n")
                if columns is None:
                    for k, v in rows:
                        fh.write(f"{k} = {_fmt(v)}\n")
                else:
                    w = csv.writer(fh, lineterminator="\n")
                    w.writerow(columns)
                    for row in rows:
                        w.writerow([_fmt(v) for v in row])
            written.append(path)
        return written


# -- shared setup -------------------------------------------------------------


def _model_box(cfg: RunConfig):
    model = get_model(cfg.get("model"))
    try:
        box = ParameterBox.from_pairs(
            [tuple(float(x) for x in part.split(",")) for part in cfg.get("box").split(";") if part.strip()]
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"box: {exc}") from exc
    problems = model.box_problems(box)
    if problems:
        raise ConfigError("; ".join(problems))
    return model, box


def _euler(cfg: RunConfig) -> EulerConfig:
    return EulerConfig(cfg.int("substeps_log2"))


def _data(cfg: RunConfig, model) -> ObservationSeries:
    if cfg.has("data"):
        series = ObservationSeries.from_csv(cfg.get("data"))
    else:
        series = simulate_dataset(model, cfg.vector("theta0"), cfg.float("v0"), cfg.int("n"), cfg.float("dt"),
                                  _euler(cfg), derived_seed(cfg.int("seed"), 10))
    series.check(model)
    return series


def _eps_schedule(cfg: RunConfig):
    if cfg.has("eps"):
        eps = cfg.float("eps")
        return (lambda N: eps), f"eps_schedule: constant {eps!r}"
    return default_eps, "eps_schedule: max(1e-8, 0.01/sqrt(N)) x box width"


def _simplex(cfg: RunConfig, box: ParameterBox, start=None):
    sched, desc = _eps_schedule(cfg)
    start = cfg.vector("start") if start is None else start
    if start.size != box.d:
        raise ConfigError(f"start has {start.size} coordinates, box has {box.d}")
    return SimplexConfig(start, cfg.float("scale"), sched, cfg.int("max_evals")), desc


def _names(model) -> list[str]:
    return list(model.param_names)


# -- commands -----------------------------------------------------------------


def cmd_simulate(cfg: RunConfig, out: Output) -> int:
    model, _ = _model_box(cfg)
    series = simulate_dataset(model, cfg.vector("theta0"), cfg.float("v0"), cfg.int("n"), cfg.float("dt"),
                              _euler(cfg), StreamKey(cfg.int("seed")))
    out.csv("dataset.csv", ["time", "value"], zip(series.times, series.values))
    return 0


def cmd_simulate_bridge(cfg: RunConfig, out: Output) -> int:
    model, _ = _model_box(cfg)
    theta = cfg.vector("theta0")
    v, w, t = cfg.float("v"), cfg.float("w"), cfg.float("t")
    model.check_state(v, w)
    frame = BridgeFrame(float(model.eta(v, theta)), float(model.eta(w, theta)), t)
    rows = []
    for r in range(1, cfg.int("replicates") + 1):
        skel, used = ea_bridge_sampler(model, theta, frame, StreamKey(cfg.int("seed"), 1, r))
        for s, x in zip(*skel.with_endpoints()):
            rows.append((r, s, float(model.eta_inv(x, theta)), used))
    out.csv("bridge.csv", ["replicate", "time", "value", "proposals"], rows)
    return 0


def cmd_estimate(cfg: RunConfig, out: Output) -> int:
    model, box = _model_box(cfg)
    series = _data(cfg, model)
    simplex, desc = _simplex(cfg, box)
    Ns = cfg.ints("Ns") if cfg.has("Ns") else [cfg.int("N")]
    seed = cfg.int("seed")
    surface = build_surface(model, box, series, seed, max(Ns), cfg.get("cache_dir") if cfg.has("cache_dir") else None)
    results = warm_start_ladder(surface, Ns, simplex)
    names = _names(model)
    dicts = []
    for res in results:
        d = res.as_dict(names)
        dicts.append(d)
        out.csv(f"trace_N{res.N}.csv", ["eval_index", *names, "loglik"], res.trace_rows(), [desc])
        block = dict(d)
        for i, a in enumerate(names):
            for j, b in enumerate(names):
                block[f"Bn_{a}_{b}"] = float(res.Bn[i, j])
                if res.sandwich is not None:
                    block[f"sandwich_{a}_{b}"] = float(res.sandwich[i, j])
        out.text(f"result_N{res.N}.txt", block, [desc])
    cols = list(dict.fromkeys(k for d in dicts for k in d))
    rows = [[d.get(c, float("nan")) for c in cols] for d in dicts]
    out.csv("estimates.csv", cols, rows, [desc, f"n_intervals: {series.n}"])
    return 0


def cmd_surface(cfg: RunConfig, out: Output) -> int:
    model, box = _model_box(cfg)
    series = _data(cfg, model)
    surface = build_surface(model, box, series, cfg.int("seed"), cfg.int("N"))
    if cfg.has("points"):
        pts = np.array([[float(x) for x in p.split(",")] for p in cfg.get("points").split(";") if p.strip()])
    else:
        pts = box.grid(cfg.int("grid") if cfg.has("grid") else 5)
    out.csv("surface.csv", [*_names(model), "loglik"], surface_grid(surface, pts))
    return 0


def cmd_profile(cfg: RunConfig, out: Output) -> int:
    model, box = _model_box(cfg)
    series = _data(cfg, model)
    names = _names(model)
    coord = cfg.get("profile_coord", names[0])
    k = names.index(coord) if coord in names else int(coord)
    surface = build_surface(model, box, series, cfg.int("seed"), cfg.int("N"))
    simplex, desc = _simplex(cfg, box)
    points = int(cfg.get("profile_points", "20"))
    lo = float(cfg.get("profile_lo", repr(float(box.lower[k]))))
    hi = float(cfg.get("profile_hi", repr(float(box.upper[k]))))
    rows = profile(surface, k, np.linspace(lo, hi, points), simplex)
    out.csv("profile.csv", [names[k], *[f"argmax_{n}" for n in names], "profile_loglik"],
            [(val, *th, ll) for val, th, ll in rows], [desc])
    return 0


def cmd_table2(cfg: RunConfig, out: Output) -> int:
    model, box = _model_box(cfg)
    series = _data(cfg, model)
    theta0 = cfg.vector("theta0")
    simplex, _ = _simplex(cfg, box, start=cfg.vector("start"))
    Ns = cfg.ints("Ns") if cfg.has("Ns") else [25, 50, 100]
    ref_eps = float(cfg.get("ref_eps", "1e-6"))
    res = run_table2(model, box, series, Ns, cfg.int("R"), cfg.int("seed"), simplex, ref_N=cfg.int("ref_N"),
                     ref_eps=ref_eps)
    names = _names(model)
    extra = [f"theta_ref: {','.join(repr(float(x)) for x in res.theta_ref)}", f"ref_eps: {ref_eps!r}",
             f"theta0: {','.join(repr(float(x)) for x in theta0)}"]
    out.csv("table2.csv", ["N", *[f"mean_{n}" for n in names], *[f"se_{n}" for n in names]], res.rows(), extra)
    rep_rows = [(r + 1, N, *res.scaled[r, k]) for r in range(res.R) for k, N in enumerate(res.Ns)]
    out.csv("table2_replicates.csv", ["replicate", "N", *names], rep_rows, extra)
    return 0


def _pairs(cfg: RunConfig) -> list[tuple[int, str]]:
    pairs = []
    for item in cfg.get("pairs", "100:sqrt,400:sqrt").split(","):
        n, rule = item.split(":", 1)
        pairs.append((int(n), rule.strip()))
    return pairs


def cmd_nscaling(cfg: RunConfig, out: Output) -> int:
    model, box = _model_box(cfg)
    simplex, desc = _simplex(cfg, box)
    res = run_nscaling(model, box, cfg.vector("theta0"), cfg.float("v0"), cfg.float("dt"), _pairs(cfg),
                       cfg.int("R"), cfg.int("seed"), simplex, _euler(cfg))
    names = _names(model)
    out.csv("nscaling.csv", ["n", "N", "rule", *[f"mean_{n}" for n in names], *[f"var_{n}" for n in names]],
            [r.row() for r in res], [desc])
    return 0


def cmd_validate(cfg: RunConfig, out: Output) -> int:
    names = [s.strip() for s in cfg.get("checks", ",".join(CHECKS)).split(",") if s.strip()]
    unknown = [n for n in names if n not in CHECKS]
    if unknown:
        raise ConfigError(f"unknown check(s) {unknown}; known: {', '.join(CHECKS)}")
    rows = []
    ok = True
    for name in names:
        res = CHECKS[name]()
        print(res.line(), flush=True)
        rows.append(res.row())
        ok &= res.passed
    out.csv("validate.csv", ["check", "passed", "statistic", "threshold", "seconds", "detail"], rows)
    return 0 if ok else 1


HANDLERS = {
    "simulate": cmd_simulate,
    "simulate-bridge": cmd_simulate_bridge,
    "estimate": cmd_estimate,
    "surface": cmd_surface,
    "profile": cmd_profile,
    "table2": cmd_table2,
    "nscaling": cmd_nscaling,
    "validate": cmd_validate,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="samle", description="Monte Carlo maximum likelihood for scalar diffusions")
    p.add_argument("--version", action="version", version=f"samle {__version__}")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="flat key = value configuration file")
    p.add_argument("--seed", type=int, help="experiment seed (unsigned 64-bit)")
    p.add_argument("--threads", type=int, help="worker width; results do not depend on it")
    p.add_argument("--out", help="output directory")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        if cfg.int("seed") < 0 or cfg.int("seed") >= 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer")
        if cfg.int("threads") < 1:
            raise ConfigError("threads must be positive")
        out = Output(cfg)
        code = HANDLERS[args.command](cfg, out)
        for path in out.flush():
            logger.info("wrote %s", path)
        return code
    except (ConfigError, ValueError, KeyError) as exc:
        print(f"samle: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
