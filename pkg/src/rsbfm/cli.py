"""Command-line front end: simulate, fit, classify and metrics.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Every run writes ``manifest.json`` with the resolved configuration, seeds and
file-format versions.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, checkpoint
from . import classifier as clf
from .chain import run_chain
from .errors import ChainError, NumericalError, ParameterError, StructuralError
from .experiment import SimulationSettings, replicate_seeds, run_simulation
from .fileio import (CSV_FORMAT_VERSION, format_float, read_config_file, read_table, write_json,
                     write_records, write_table)
from .model import Dataset, SamplerConfig
from .simulation import METRIC_COLUMNS, evaluate_estimate

OUTPUT_DIR_ENV = "RSBFM_OUTPUT_DIR"
DEFAULT_OUTPUT_DIR = "rsbfm-output"
MANIFEST_VERSION = 1

log = logging.getLogger("rsbfm")


class UsageError(Exception):
    """Bad flag, config key or value; maps to exit code 2."""


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _optional_int(text):
    if text is None or str(text).strip().lower() in ("", "none", "auto"):
        return None
    return int(text)


# key, type, SamplerConfig field (None for run-level keys), help
SAMPLER_OPTIONS = [
    ("iters", int, "n_iterations", "total sweeps"),
    ("burnin", int, "n_burnin", "discarded sweeps"),
    ("thin", int, "thin", "keep every thin-th post burn-in draw"),
    ("nu", float, "nu", "degrees of freedom of the t likelihood"),
    ("a_sigma", float, "a_sigma", "error precision prior shape"),
    ("b_sigma", float, "b_sigma", "error precision prior rate"),
    ("kappa", float, "kappa", "local shrinkage hyperparameter"),
    ("step_size", float, "nuts_step_size", "NUTS leapfrog step size"),
    ("max_depth", int, "nuts_max_depth", "NUTS maximum tree depth"),
    ("adapt_intercept", float, "adapt_intercept", "adaptation probability intercept"),
    ("adapt_slope", float, "adapt_slope", "adaptation probability slope"),
    ("threshold", float, "trunc_threshold", "loading magnitude counted as negligible"),
    ("proportion", float, "trunc_proportion", "share of negligible loadings that drops a column"),
    ("mh_sd_a1", float, "mh_sd_a1", "initial proposal sd for a1"),
    ("mh_sd_a2", float, "mh_sd_a2", "initial proposal sd for a2"),
    ("initial_k", _optional_int, "initial_k", "starting number of factors"),
    ("max_k", _optional_int, "max_k", "upper bound on the number of factors"),
    ("min_k", int, "min_k", "lower bound on the number of factors"),
    ("seed", int, "seed", "root seed"),
    ("eta_sampler", str, "eta_sampler_mode", "nuts or exact"),
    ("likelihood", str, "likelihood", "t or normal"),
    ("adapt", _bool, "adapt", "adaptive truncation"),
    ("tune_mh", _bool, "tune_mh", "tune MH proposal sds during burn-in"),
    ("parallel", _bool, "parallel", "parallel factor updates within a sweep"),
    ("progress_every", int, "progress_every", "log progress every this many sweeps"),
    ("checkpoint_every", int, "checkpoint_every", "checkpoint interval in sweeps"),
]

RUN_OPTIONS = {
    "simulate": [
        ("p", int, None, "number of variables"),
        ("k", int, None, "true number of factors"),
        ("n", int, None, "observations per replicate"),
        ("nu0", float, None, "degrees of freedom of the generating t"),
        ("zero_fraction", float, None, "target share of zero off-diagonal entries"),
        ("replicates", int, None, "number of replicates"),
        ("compare", _bool, None, "also run the normal-likelihood model"),
        ("jobs", int, None, "parallel worker processes"),
        ("timing", _bool, None, "record wall-clock seconds in the metrics file"),
    ],
    "fit": [],
    "classify": [
        ("xi", float, None, "decision threshold on the log likelihood ratio"),
        ("label_column", str, None, "name of the label column in the test file"),
    ],
    "metrics": [],
}

SIMULATE_DEFAULTS = dict(p=200, k=10, n=100, nu0=3.0, zero_fraction=0.75, replicates=10,
                         compare=True, jobs=1, timing=False)
CLASSIFY_DEFAULTS = dict(xi=0.0, label_column="label")


def _options(command):
    return SAMPLER_OPTIONS + RUN_OPTIONS[command] if command != "metrics" else []


def _add_options(parser, command):
    for key, typ, _, help_text in _options(command):
        flag = "--" + key.replace("_", "-")
        if typ is _bool:
            parser.add_argument(flag, dest=key, action=argparse.BooleanOptionalAction,
                                default=None, help=help_text)
        else:
            parser.add_argument(flag, dest=key, default=None, help=help_text)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rsbfm", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key=value config file; flags override it")
        p.add_argument("--out", help=f"output directory (default ${OUTPUT_DIR_ENV} or "
                                     f"./{DEFAULT_OUTPUT_DIR})")
        p.add_argument("--quiet", action="store_true", help="only warnings on standard error")

    p = sub.add_parser("simulate", help="replicated synthetic experiment")
    common(p)
    _add_options(p, "simulate")

    p = sub.add_parser("fit", help="estimate the covariance of one data file")
    p.add_argument("data", help="numeric CSV, one observation per row")
    p.add_argument("--resume", help="chain checkpoint to continue from")
    common(p)
    _add_options(p, "fit")

    p = sub.add_parser("classify", help="two-class discriminant analysis")
    p.add_argument("class0")
    p.add_argument("class1")
    p.add_argument("test")
    common(p)
    _add_options(p, "classify")

    p = sub.add_parser("metrics", help="compare a saved estimate with a saved truth")
    p.add_argument("--estimate", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--out")
    p.add_argument("--quiet", action="store_true")
    return parser


def resolve_settings(command, args, defaults=None) -> dict:
    """Merge defaults, config-file values and flags (flags win), converting types."""
    table = {key: typ for key, typ, _, _ in _options(command)}
    merged = dict(defaults or {})
    sources = []
    if getattr(args, "config", None):
        try:
            sources.append(("config file", read_config_file(args.config)))
        except OSError as exc:
            raise UsageError(f"cannot read config file: {exc}") from exc
    sources.append(("flag", {k: getattr(args, k) for k in table if getattr(args, k) is not None}))
    for origin, values in sources:
        for key, raw in values.items():
            if key not in table:
                raise UsageError(f"unknown {origin} key '{key}'")
            try:
                merged[key] = table[key](raw)
            except (TypeError, ValueError) as exc:
                raise UsageError(f"invalid value for '{key}': {exc}") from exc
    return merged


def sampler_config(settings: dict, base: SamplerConfig | None = None) -> SamplerConfig:
    fields = {field: settings[key] for key, _, field, _ in SAMPLER_OPTIONS if key in settings}
    config = dataclasses.replace(base or SamplerConfig(), **fields)
    try:
        config.validate()
    except ParameterError as exc:
        raise UsageError(f"invalid sampler setting: {exc}") from exc
    return config


def _output_dir(args) -> Path:
    out = Path(args.out or os.environ.get(OUTPUT_DIR_ENV) or DEFAULT_OUTPUT_DIR)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise UsageError(f"output directory {out} is not writable")
    return out


def _manifest(out, command, settings, seeds, inputs=None, config=None):
    sampler = None
    if config is not None:
        # the output location is not part of the run's identity
        sampler = {k: v for k, v in dataclasses.asdict(config).items() if k != "checkpoint_dir"}
    return write_json(out / "manifest.json", {
        "command": command,
        "sampler": sampler,
        "package_version": __version__,
        "formats": {"manifest": MANIFEST_VERSION, "csv": CSV_FORMAT_VERSION,
                    "checkpoint": checkpoint.FORMAT_VERSION},
        "settings": settings,
        "seeds": seeds,
        "inputs": inputs or {},
    })


def _read_data(path, drop=None):
    try:
        matrix, names = read_table(path)
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc}") from exc
    except StructuralError as exc:
        raise StructuralError(f"{path}: {exc}") from exc
    labels = None
    if drop is not None and names is not None and drop in names:
        col = names.index(drop)
        labels = matrix[:, col].astype(int)
        matrix = np.delete(matrix, col, axis=1)
        names = names[:col] + names[col + 1:]
    return matrix, names, labels


def cmd_simulate(args) -> int:
    settings = resolve_settings("simulate", args, SIMULATE_DEFAULTS)
    config = sampler_config(settings)
    out = _output_dir(args)
    sim = SimulationSettings(p=settings["p"], k=settings["k"], n=settings["n"],
                             nu0=settings["nu0"], target_zero_fraction=settings["zero_fraction"],
                             replicates=settings["replicates"], compare=settings["compare"],
                             seed=config.seed, sampler=config)
    if sim.replicates < 1 or settings["jobs"] < 1:
        raise UsageError("replicates and jobs must be at least 1")
    seeds = replicate_seeds(config.seed, sim.replicates)
    results = run_simulation(sim, jobs=settings["jobs"])

    rows = []
    for res in results:
        elapsed = res.elapsed_seconds if settings["timing"] else None
        rows.append(res.metrics.csv_row(res.replicate_id, sim.p, sim.k, sim.nu0, config.nu,
                                        res.likelihood, elapsed))
        tag = f"{res.replicate_id}_{res.likelihood}"
        write_table(out / f"estimate_{tag}.csv", res.mean_covariance)
        write_json(out / f"replicate_{tag}.json", {
            "replicate_id": res.replicate_id, "likelihood": res.likelihood,
            "data_seed": res.data_seed, "chain_seed": res.chain_seed,
            "metrics": dataclasses.asdict(res.metrics), "k_mode": res.k_mode,
            "k_credible_interval": list(res.k_credible_interval),
            "zero_entry_percentiles": list(res.zero_percentiles),
            "zero_fraction": res.zero_fraction, "acceptance_rates": res.acceptance_rates,
        })
        if res.likelihood == results[0].likelihood:
            write_table(out / f"truth_{res.replicate_id}.csv", res.true_covariance)
    write_records(out / "metrics.csv", METRIC_COLUMNS, rows)
    _manifest(out, "simulate", settings, {
        "root": config.seed,
        "replicates": [{"replicate_id": r, "data_seed": d, "chain_seed": c}
                       for r, (d, c) in enumerate(seeds)],
    }, config=config)
    print(out / "metrics.csv")
    return 0


def cmd_fit(args) -> int:
    settings = resolve_settings("fit", args)
    out = _output_dir(args)
    config = sampler_config(settings, SamplerConfig(checkpoint_dir=str(out)))
    matrix, names, _ = _read_data(args.data)
    data = Dataset(matrix, variable_names=names, source_tag=str(args.data))
    summary = run_chain(data, config, resume_from=args.resume)

    write_table(out / "mean_covariance.csv", summary.mean_covariance, names)
    write_records(out / "k_trace.csv", ["iteration", "k"],
                  [{"iteration": d.iteration, "k": d.k} for d in summary.diagnostics])
    diag_cols = [f.name for f in dataclasses.fields(summary.diagnostics[0])] if summary.diagnostics else []
    write_records(out / "diagnostics.csv", diag_cols,
                  [dataclasses.asdict(d) for d in summary.diagnostics])
    lines = [f"n_samples {summary.n_samples}",
             f"k_mode {summary.k_mode}",
             f"k_credible_interval {summary.k_credible_interval[0]} {summary.k_credible_interval[1]}"]
    lines += [f"acceptance {key} {value!r}" for key, value in sorted(summary.acceptance_rates.items())]
    lines += ["adaptation " + ev.log_line() for ev in summary.adaptation_events]
    (out / "diagnostics.log").write_text("\n".join(lines) + "\n", encoding="utf-8")
    _manifest(out, "fit", settings, {"chain": config.seed},
              {"data": str(args.data), "resume": args.resume}, config)
    print(out / "mean_covariance.csv")
    return 0


def cmd_classify(args) -> int:
    settings = resolve_settings("classify", args, CLASSIFY_DEFAULTS)
    out = _output_dir(args)
    config = sampler_config(settings, clf.classifier_config())
    label_col = settings["label_column"]
    class0, _, _ = _read_data(args.class0, drop=label_col)
    class1, _, _ = _read_data(args.class1, drop=label_col)
    test, _, labels = _read_data(args.test, drop=label_col)
    widths = {args.class0: class0.shape[1], args.class1: class1.shape[1], args.test: test.shape[1]}
    if len(set(widths.values())) != 1:
        raise StructuralError("inconsistent number of variables: "
                              + ", ".join(f"{k}={v}" for k, v in widths.items()))

    model = clf.fit(class0, class1, config, threshold=settings["xi"])
    clf.save_model(out / "classifier.rsbf", model)
    llr = clf.scores(test, model)
    predictions = (llr > model.threshold).astype(int)
    write_records(out / "predictions.csv", ["row", "llr", "label"],
                  [{"row": i + 1, "llr": float(v), "label": int(c)}
                   for i, (v, c) in enumerate(zip(llr, predictions))])
    if labels is None:
        print(f"warning: no '{label_col}' column in {args.test}; evaluation skipped",
              file=sys.stderr)
    else:
        summary = clf.evaluate(predictions, labels)
        write_records(out / "evaluation.csv", ["n", "accuracy", "sensitivity", "specificity"],
                      [dict(n=len(labels), **summary)])
    seeds = [int(c.generate_state(1, np.uint32)[0])
             for c in np.random.SeedSequence(config.seed).spawn(2)]
    _manifest(out, "classify", settings, {"root": config.seed, "class0": seeds[0],
                                          "class1": seeds[1]},
              {"class0": str(args.class0), "class1": str(args.class1), "test": str(args.test)},
              config)
    print(out / "predictions.csv")
    return 0


def cmd_metrics(args) -> int:
    estimate, _, _ = _read_data(args.estimate)
    truth, _, _ = _read_data(args.truth)
    report = evaluate_estimate(estimate, truth)
    columns = ["one_norm", "two_norm", "mse", "aab", "mab"]
    record = dataclasses.asdict(report)
    if args.out:
        out = _output_dir(args)
        write_records(out / "metrics.csv", columns, [record])
    print(",".join(columns))
    print(",".join(format_float(record[c]) for c in columns))
    return 0


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "classify": cmd_classify,
            "metrics": cmd_metrics}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, StructuralError, ParameterError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ChainError as exc:
        where = exc.checkpoint if exc.checkpoint is not None else "none written"
        print(f"error: {exc} (checkpoint: {where})", file=sys.stderr)
        return 1
    except (NumericalError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
