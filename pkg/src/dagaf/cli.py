"""Command-line entry point: ``dagaf {simulate,discover,synthesize,evaluate,benchmark}``.

Machine-readable output goes to files under ``--out``; progress is logged
to standard error. Config files are flat ``key = value`` text (``#``
starts a comment) naming :class:`~dagaf.trainer.TrainConfig` fields;
``--set key=value`` overrides them. ``DAGAF_SEED`` supplies the seed
when neither a flag nor the config sets one.
"""
from __future__ import annotations

import argparse
import configparser
import csv
import json
import logging
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import evalsuite, graph, semgen, trainer
from .diffcore import ConfigError
from .models import Assumption, model_from_checkpoint, save_model
from .semgen import Dataset, NoiseSpec, SemFamily

log = logging.getLogger("dagaf")

ABLATION_PRESETS = {
    "w/o-recon": {"w_mse": 0.0, "w_kld": 0.0, "w_mmd": 0.0},
    "mse": {"recon": "mse", "w_kld": 0.0, "w_mmd": 0.0},
    "nll": {"recon": "nll", "w_kld": 0.0, "w_mmd": 0.0},
    "mse+mmd": {"recon": "mse", "w_kld": 0.0},
    "nll+mmd": {"recon": "nll", "w_kld": 0.0},
    "mse+kld": {"recon": "mse", "w_mmd": 0.0},
    "nll+kld": {"recon": "nll", "w_mmd": 0.0},
    "mse+kld+mmd": {"recon": "mse"},
    "nll+kld+mmd": {"recon": "nll"},
}

_SENS_BASE = {"lr": 3e-3, "dropout": 0.5, "z_size": 1, "batch_size": 100}
SENSITIVITY_PRESETS = {
    "base": dict(_SENS_BASE),
    "dropout-0": {**_SENS_BASE, "dropout": 0.0},
    "z-2": {**_SENS_BASE, "z_size": 2},
    "z-5": {**_SENS_BASE, "z_size": 5},
    "batch-500": {**_SENS_BASE, "batch_size": 500},
    "batch-1000": {**_SENS_BASE, "batch_size": 1000},
    "lr-2e-4": {**_SENS_BASE, "lr": 2e-4},
    "lr-1e-3": {**_SENS_BASE, "lr": 1e-3},
}

PRESETS = {**ABLATION_PRESETS, **{f"sens:{k}": v for k, v in SENSITIVITY_PRESETS.items()}}


class UsageError(Exception):
    """Bad flags or inputs detected before any output is written."""


# -- config handling ---------------------------------------------------------

def read_config_file(path):
    """Parse a flat ``key = value`` file into a dict of strings."""
    values = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    for lineno, line in enumerate(lines, start=1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise UsageError(f"{path}:{lineno}: expected key = value, got {line.strip()!r}")
        key, val = (part.strip() for part in text.split("=", 1))
        values[key] = val
    return values


def parse_overrides(items):
    out = {}
    for item in items or ():
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, val = item.split("=", 1)
        out[key.strip()] = val.strip()
    return out


def resolve_seed(flag_seed, settings):
    if flag_seed is not None:
        return flag_seed
    if "seed" in settings:
        return None
    env = os.environ.get("DAGAF_SEED")
    if env is None or not env.strip():
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"DAGAF_SEED must be an integer, got {env!r}") from None


def build_config(config_path=None, overrides=None, seed=None, base=None, **fixed):
    """Merge base values, a config file, ``--set`` overrides and fixed flags."""
    settings = dict(base or {})
    if config_path:
        settings.update(read_config_file(config_path))
    settings.update(overrides or {})
    settings.update({k: v for k, v in fixed.items() if v is not None})
    resolved = resolve_seed(seed, settings)
    if resolved is not None:
        settings["seed"] = resolved
    try:
        return trainer.TrainConfig.from_mapping(settings)
    except (ConfigError, TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None


def parse_noise(text):
    kind, _, scale = text.partition(":")
    try:
        return NoiseSpec(kind.strip(), float(scale) if scale else 1.0)
    except (ConfigError, ValueError) as exc:
        raise UsageError(f"bad --noise {text!r}: {exc}") from None


def _load_data(path):
    try:
        data = semgen.read_csv(path)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if data.n == 0:
        raise UsageError(f"{path}: no data rows")
    return data


def _prepare_out(path):
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)


# -- simulate ----------------------------------------------------------------

def simulate_instance(family, d, n, degree, noise, seed, standardize=False):
    """Draw a DAG and a dataset from one seed; used by simulate and benchmark."""
    rng = np.random.default_rng(seed)
    dag, weights = graph.sample_er_dag(d, degree, rng)
    data = semgen.generate(weights, family, noise, n, rng, standardize)
    return dag, weights, data


def cmd_simulate(args):
    if args.n < 1:
        raise UsageError(f"--n must be positive, got {args.n}")
    if args.d < 2:
        raise UsageError(f"--d must be at least 2, got {args.d}")
    if not 0 < args.degree < args.d:
        raise UsageError(f"--degree must be in (0, d), got {args.degree}")
    noise = parse_noise(args.noise)
    seed = resolve_seed(args.seed, {})
    dag, weights, data = simulate_instance(SemFamily(args.family), args.d, args.n, args.degree,
                                           noise, seed, args.standardize)
    out = _prepare_out(args.out)
    semgen.write_csv(data, out / "data.csv")
    graph.write_edge_list(dag, out / "truth_edges.csv")
    graph.write_matrix(weights, out / "weights.csv")
    log.info("wrote %d x %d samples and %d true edges to %s", data.n, data.d, len(dag), out)
    return 0


# -- discover ----------------------------------------------------------------

def _shd_summary(adjacency, truth, tau):
    return graph.shd(graph.threshold(adjacency, tau), truth).as_dict()


def cmd_discover(args):
    data = _load_data(args.data)
    cfg = build_config(args.config, parse_overrides(args.set), args.seed,
                       base={"run_step2": "false"}, assumption=args.assumption)
    truth = None
    if args.truth:
        try:
            truth = graph.read_edge_list(args.truth, data.d)
        except (OSError, ValueError) as exc:
            raise UsageError(str(exc)) from None
    s1, report = trainer.fit_step1(data, cfg)
    if truth is not None:
        report.shd = _shd_summary(report.adjacency, truth, cfg.threshold_tau)
    out = _prepare_out(args.out)
    save_model(out / "checkpoint", s1.model, s1.critic, config=cfg.as_dict(),
               columns=list(data.columns), stage="discovery")
    report.to_json(out / "report.json")
    graph.write_matrix(report.adjacency, out / "adjacency.csv")
    graph.write_edge_list(graph.BinaryDag(data.d, report.dag_edges), out / "edges.csv")
    if report.cyclic_after_threshold:
        log.warning("thresholded graph contains a cycle (reported as-is)")
    log.info("discovery finished: h=%.3e, %d edges, %s", report.h, len(report.dag_edges),
             report.termination)
    return 0


# -- synthesize --------------------------------------------------------------

def cmd_synthesize(args):
    if args.n < 0:
        raise UsageError(f"--n must be non-negative, got {args.n}")
    data = _load_data(args.data)
    try:
        model, meta = model_from_checkpoint(args.checkpoint)
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"cannot load checkpoint {args.checkpoint}: {exc}") from None
    if model.d != data.d:
        raise UsageError(f"checkpoint has d={model.d} but {args.data} has {data.d} columns")
    stored = {k: str(v) if not isinstance(v, list) else ",".join(map(str, v))
              for k, v in meta.get("config", {}).items()}
    if args.assumption and Assumption(args.assumption) != model.assumption:
        raise UsageError(f"--assumption {args.assumption} does not match the checkpoint "
                         f"({model.assumption.value})")
    cfg = build_config(args.config, parse_overrides(args.set), args.seed, base=stored)
    if Assumption(cfg.assumption) != model.assumption:
        raise UsageError(f"config assumption {cfg.assumption} does not match the checkpoint "
                         f"({model.assumption.value})")
    rng = np.random.default_rng(cfg.seed + 1)
    s2, report = trainer.fit_step2(model, data, cfg, rng)
    synth = trainer.synthesize(s2.model, args.n, rng, s2.levels, data.columns)
    values = synth.values
    if cfg.standardize:
        sd = data.values.std(axis=0)
        values = values * np.where(sd > 0, sd, 1.0) + data.values.mean(axis=0)
    report_dict = report.as_dict()
    report_dict["n_synthetic"] = int(args.n)
    report_dict["single_pass_fallback"] = bool(report.cyclic_after_threshold)
    out = _prepare_out(args.out)
    semgen.write_csv(Dataset(values, list(data.columns)), out / "synthetic.csv")
    save_model(out / "checkpoint", s2.model, s2.critic, config=cfg.as_dict(),
               columns=list(data.columns), stage="synthesis")
    _write_json(out / "report.json", report_dict)
    log.info("wrote %d synthetic rows to %s", args.n, out / "synthetic.csv")
    return 0


# -- evaluate ----------------------------------------------------------------

def cmd_evaluate(args):
    real = _load_data(args.real)
    synth = _load_data(args.synth)
    if real.d != synth.d:
        raise UsageError(f"column-count mismatch: {args.real} has {real.d}, {args.synth} has {synth.d}")
    if real.n < 2 or synth.n < 2:
        raise UsageError("both tables need at least 2 rows")
    rep = evalsuite.quality_report(real.values, synth.values, real.columns)
    out = _prepare_out(args.out)
    rep.to_json(out / "quality.json")
    rows = [("real", *r) for r in rep.pca_real_2d.tolist()]
    rows += [("synthetic", *r) for r in rep.pca_synth_2d.tolist()]
    pcs = [f"pc{i + 1}" for i in range(rep.pca_real_2d.shape[1])]
    evalsuite.write_rows(out / "pca.csv", ["source", *pcs], rows)
    evalsuite.write_rows(out / "quantiles.csv", ["column", "quantile", "real", "synthetic"],
                         evalsuite.quantile_table(real.values, synth.values, real.columns))
    evalsuite.write_rows(out / "histograms.csv",
                         ["column", "bin_left", "bin_right", "real_count", "synthetic_count"],
                         evalsuite.histogram_table(real.values, synth.values, real.columns))
    for name, mat in (("corr_real.csv", rep.corr_real), ("corr_synthetic.csv", rep.corr_synth)):
        evalsuite.write_rows(out / name, list(real.columns), mat.tolist())
    log.info("corr diff %.4f, mmd %.4g", rep.corr_frobenius_diff, rep.mmd_stat)
    return 0


# -- benchmark ---------------------------------------------------------------

@dataclass
class ExperimentSpec:
    name: str
    family: str | None
    d: int
    n: int
    seeds: list
    assumption: str
    degree: float = 3.0
    noise: str = "gaussian"
    data: str | None = None
    truth: str | None = None
    presets: list = field(default_factory=lambda: [""])
    overrides: dict = field(default_factory=dict)


@dataclass
class BenchmarkRow:
    name: str
    family: str
    d: int
    n: int
    assumption: str
    preset: str
    seeds: list
    shds: list
    wallclocks: list
    errors: list

    @property
    def mean_shd(self):
        return float(np.mean(self.shds)) if self.shds and not self.errors else math.nan

    @property
    def std_shd(self):
        return float(np.std(self.shds)) if self.shds and not self.errors else math.nan

    @property
    def mean_wallclock(self):
        return float(np.mean(self.wallclocks)) if self.wallclocks else math.nan

    HEADER = ["name", "family", "d", "n", "assumption", "preset", "seeds", "mean_shd", "std_shd",
              "shd_per_seed", "mean_wallclock_s", "error"]

    def as_row(self):
        return [self.name, self.family, self.d, self.n, self.assumption, self.preset or "-",
                " ".join(map(str, self.seeds)), f"{self.mean_shd:.4g}", f"{self.std_shd:.4g}",
                " ".join(str(s) for s in self.shds), f"{self.mean_wallclock:.3f}",
                "; ".join(self.errors)]


_SPEC_KEYS = {"family", "d", "n", "seeds", "assumption", "degree", "noise", "data", "truth",
              "preset", "presets"}


def parse_benchmark_spec(path):
    """Read an INI-style spec: one ``[section]`` per experiment.

    Recognised keys are ``family d n seeds assumption degree noise data
    truth presets``; every other key is a TrainConfig override. ``data``
    plus ``truth`` benchmark a fixed dataset (such as Sachs) instead of
    simulating one per seed.
    """
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        with open(path) as fh:
            parser.read_file(fh)
    except (OSError, configparser.Error) as exc:
        raise UsageError(f"cannot parse spec {path}: {exc}") from None
    if not parser.sections():
        raise UsageError(f"{path}: spec file lists no experiments")
    base_dir = Path(path).parent
    specs = []
    for name in parser.sections():
        sec = dict(parser[name])
        try:
            seeds = [int(s) for s in sec.get("seeds", "").replace(",", " ").split()]
            if not seeds:
                raise UsageError(f"[{name}]: seeds must be non-empty")
            presets = [p.strip() for p in sec.get("presets", sec.get("preset", "")).split(",")]
            presets = [p for p in presets if p] or [""]
            for p in presets:
                if p and p not in PRESETS:
                    raise UsageError(f"[{name}]: unknown preset {p!r}; known: {', '.join(PRESETS)}")
            data = sec.get("data")
            truth = sec.get("truth")
            if data:
                if not truth:
                    raise UsageError(f"[{name}]: a data file needs a truth edge list")
                data = str(base_dir / data)
                truth = str(base_dir / truth)
                family = sec.get("family")
                d = int(sec["d"]) if "d" in sec else 0
                n = int(sec["n"]) if "n" in sec else 0
            else:
                family = SemFamily(sec["family"]).value
                d, n = int(sec["d"]), int(sec["n"])
                if d < 2 or n < 1:
                    raise UsageError(f"[{name}]: need d >= 2 and n >= 1")
            # post-nonlinear data defaults to the matching assumption
            default = "pnl" if (family or "").startswith("post-non-linear") else "anm"
            assumption = Assumption(sec.get("assumption", default)).value
        except KeyError as exc:
            raise UsageError(f"[{name}]: missing key {exc}") from None
        except ValueError as exc:
            raise UsageError(f"[{name}]: {exc}") from None
        overrides = {k: v for k, v in sec.items() if k not in _SPEC_KEYS}
        spec = ExperimentSpec(name, family, d, n, seeds, assumption,
                              float(sec.get("degree", 3)), sec.get("noise", "gaussian"),
                              data, truth, presets, overrides)
        for p in presets:
            _cell_config(spec, p, seeds[0])  # validate before anything runs
        specs.append(spec)
    return specs


def _cell_config(spec, preset, seed):
    settings = {**spec.overrides, **{k: str(v) for k, v in PRESETS.get(preset, {}).items()}}
    settings.update(assumption=spec.assumption, seed=str(seed), run_step2="false")
    return build_config(overrides=settings)


def run_cell(spec, preset, seed):
    """One (experiment, preset, seed) run. Returns ``(shd, wallclock, error)``."""
    started = time.perf_counter()
    try:
        cfg = _cell_config(spec, preset, seed)
        if spec.data:
            data = semgen.read_csv(spec.data)
            truth = graph.read_edge_list(spec.truth, data.d)
        else:
            truth, _, data = simulate_instance(SemFamily(spec.family), spec.d, spec.n, spec.degree,
                                               parse_noise(spec.noise), seed)
        _, report = trainer.fit_step1(data, cfg)
        metrics = graph.shd(graph.threshold(report.adjacency, cfg.threshold_tau), truth)
        return metrics.shd, time.perf_counter() - started, None
    except Exception as exc:  # recorded per row; the grid continues
        return None, time.perf_counter() - started, f"seed {seed}: {type(exc).__name__}: {exc}"


def _cell_dims(spec):
    if spec.data and not spec.d:
        try:
            data = semgen.read_csv(spec.data)
            return data.d, data.n
        except ValueError:
            return 0, 0
    return spec.d, spec.n


def run_benchmark(specs, jobs=1):
    cells = [(s, p, seed) for s in specs for p in s.presets for seed in s.seeds]
    if jobs > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run_cell, *zip(*cells)))
    else:
        results = [run_cell(*c) for c in cells]
    by_key = {}
    for (spec, preset, seed), res in zip(cells, results):
        by_key.setdefault((spec.name, preset), []).append((seed, res))
    rows = []
    for spec in specs:
        d, n = _cell_dims(spec)
        for preset in spec.presets:
            shds, times, errors = [], [], []
            for seed, (shd, wall, err) in by_key[(spec.name, preset)]:
                times.append(wall)
                if err:
                    errors.append(err)
                else:
                    shds.append(shd)
            rows.append(BenchmarkRow(spec.name, spec.family or "data", d, n, spec.assumption,
                                     preset, list(spec.seeds), shds, times, errors))
    return rows


def write_benchmark(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(BenchmarkRow.HEADER)
        for row in rows:
            w.writerow(row.as_row())


def cmd_benchmark(args):
    specs = parse_benchmark_spec(args.spec)
    jobs = args.jobs or os.cpu_count() or 1
    if jobs < 1:
        raise UsageError(f"--jobs must be positive, got {jobs}")
    rows = run_benchmark(specs, jobs)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_benchmark(rows, out)
    for row in rows:
        log.info("%s [%s]: SHD %.2f +/- %.2f", row.name, row.preset or "-", row.mean_shd, row.std_shd)
    return 0


# -- entry point -------------------------------------------------------------

def _add_config_flags(p):
    p.add_argument("--config", help="key = value file of TrainConfig fields")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config field")
    p.add_argument("--seed", type=int, default=None)


def build_parser():
    parser = argparse.ArgumentParser(prog="dagaf", description=__doc__.splitlines()[0])
    parser.add_argument("-q", "--quiet", action="store_true", help="only log warnings")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="sample an ER DAG and a dataset")
    p.add_argument("--family", required=True, choices=[f.value for f in SemFamily])
    p.add_argument("--d", type=int, required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--degree", type=float, default=3.0)
    p.add_argument("--noise", default="gaussian", help="gaussian|uniform[:scale]")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--standardize", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("discover", help="learn a DAG from a CSV table")
    p.add_argument("--data", required=True)
    p.add_argument("--assumption", choices=[a.value for a in Assumption], default=None)
    p.add_argument("--truth", help="edge-list CSV of the true graph")
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_discover)

    p = sub.add_parser("synthesize", help="train the synthesis model and sample rows")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--assumption", choices=[a.value for a in Assumption], default=None)
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    p.set_defaults(func=cmd_synthesize)

    p = sub.add_parser("evaluate", help="compare a synthetic table with real data")
    p.add_argument("--real", required=True)
    p.add_argument("--synth", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("benchmark", help="run an experiment grid from a spec file")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--jobs", type=int, default=None, help="worker processes (default: all cores)")
    p.set_defaults(func=cmd_benchmark)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, stream=sys.stderr,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"dagaf {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, ValueError, trainer.TrainingAborted, semgen.GenerationError) as exc:
        print(f"dagaf {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
