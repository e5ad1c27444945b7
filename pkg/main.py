from __future__ import annotations

import argparse
import json
import shutil
import sys
import time
import warnings
from pathlib import Path
from typing import Any

import numpy as np
import pandas as pd

from core.assembler import assemble
from core.config_loader import ConfigError, EngineConfig, load_all_configs, load_model_spec
from core.default_configs import restore_default_configs
from core.inference import fit, starting_point
from core.models import FitResult, ModelSpec
from core.oracle import fd_check, quad_posterior
from core.postprocess import (
    baseline_curve,
    cif,
    cure_fraction,
    display_name,
    gumbel_convert,
    hazard_eval,
    prior_vs_posterior,
    sample_hyperpar,
    summarise,
    transition_probs,
)
from core.survdata import read_dataset_csv
from core.version import APP_NAME, APP_VERSION
from core.writer import (
    inspect_run,
    write_curve,
    write_json,
    write_marginals,
    write_prior_posterior,
    write_samples,
    write_summary,
)


def _base_dir() -> Path:
    return Path(sys.executable).parent if getattr(sys, "frozen", False) else Path(__file__).parent


def make_run_dir(output_root: str, model_name: str) -> Path:
    root = Path(output_root)
    root.mkdir(parents=True, exist_ok=True)

    prefix = f"{model_name}_run"
    highest = 0
    for child in root.iterdir():
        if not child.is_dir():
            continue
        name = child.name
        if not name.startswith(prefix):
            continue

        suffix = name[len(prefix) :]
        if len(suffix) == 3 and suffix.isdigit():
            highest = max(highest, int(suffix))

    run_dir = root / f"{prefix}{highest + 1:03d}"
    run_dir.mkdir(parents=False, exist_ok=False)
    return run_dir


def _add_model_arguments(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--spec", required=True, help="Path to the model spec JSON.")
    parser.add_argument(
        "--data",
        action="append",
        default=[],
        metavar="NAME=PATH",
        help="Dataset CSV referenced by the spec (repeatable).",
    )
    parser.add_argument("--config-dir", default=None, help="Engine config folder (default: ./configs).")


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description=f"Run the {APP_NAME} survival and joint-model engine.")
    parser.add_argument(
        "--restore-configs",
        action="store_true",
        help="Rewrite the shipped default configs next to the program and exit.",
    )
    commands = parser.add_subparsers(dest="command")

    fit_parser = commands.add_parser("fit", help="Assemble and fit a model spec.")
    _add_model_arguments(fit_parser)
    fit_parser.add_argument("--out", default="survlaplace_runs", help="Root output folder.")
    fit_parser.add_argument("--seed", type=int, default=0, help="Seed for posterior sampling.")
    fit_parser.add_argument("--samples", type=int, default=0, help="Hyperparameter draws written to samples/.")
    fit_parser.add_argument(
        "--strategy",
        choices=["auto", "grid", "eb"],
        default=None,
        help="Hyperparameter integration strategy (default: the spec's).",
    )
    fit_parser.add_argument("--hr", action="store_true", help="Report survival effects as hazard ratios.")
    fit_parser.add_argument("--sdcor", action="store_true", help="Report standard deviations and correlations.")
    fit_parser.add_argument("--priors", action="store_true", help="Write prior vs posterior density grids.")
    fit_parser.add_argument("--keep-config", action="store_true", help="Retain every factorisation of the fit.")
    fit_parser.add_argument("--validate-only", action="store_true", help="Check the spec and data without fitting.")

    inspect_parser = commands.add_parser("inspect", help="Re-read and check the artifacts of a run directory.")
    inspect_parser.add_argument("run_dir", help="Run directory written by 'fit'.")

    oracle_parser = commands.add_parser("oracle", help="Brute-force verification tools.")
    oracle_commands = oracle_parser.add_subparsers(dest="oracle_command", required=True)
    quad_parser = oracle_commands.add_parser("quad", help="Tensor-grid quadrature posterior of a tiny model.")
    _add_model_arguments(quad_parser)
    quad_parser.add_argument("--resolution", type=int, default=41, help="Grid points per dimension.")
    fd_parser = oracle_commands.add_parser("fd", help="Finite-difference check of the log joint.")
    _add_model_arguments(fd_parser)
    fd_parser.add_argument("--h", type=float, default=1e-5, help="Finite-difference step.")
    fd_parser.add_argument("--points", type=int, default=10, help="Random evaluation points.")
    fd_parser.add_argument("--seed", type=int, default=0, help="Seed for the evaluation points.")
    return parser


def _parse_data_arguments(items: list[str]) -> dict[str, str]:
    paths: dict[str, str] = {}
    for item in items:
        name, sep, path = item.partition("=")
        if not sep or not name.strip() or not path.strip():
            raise ConfigError(f"--data expects NAME=PATH, got '{item}'")
        if name.strip() in paths:
            raise ConfigError(f"--data names dataset '{name.strip()}' twice")
        paths[name.strip()] = path.strip()
    return paths


def _load_inputs(
    spec_path: str,
    data: list[str],
    config_dir: str | None,
    soft: list[str],
) -> tuple[ModelSpec, dict[str, Any], EngineConfig]:
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        config = load_all_configs(config_dir or str(_base_dir() / "configs"))
        spec = load_model_spec(spec_path)
    soft.extend(str(item.message) for item in caught)
    datasets = {name: read_dataset_csv(path) for name, path in _parse_data_arguments(data).items()}
    return spec, datasets, config


def run_validate(spec_path: str, data: list[str], config_dir: str | None = None) -> list[str]:
    """Schema and assembly checks only; returns the soft warnings."""
    soft: list[str] = []
    spec, datasets, config = _load_inputs(spec_path, data, config_dir, soft)
    assemble(spec, datasets, config)
    return soft


def _marginals_to_write(result: FitResult) -> dict[str, Any]:
    model = result.model
    labels = model.latent_labels()
    marginals = {}
    for block in model.blocks:
        if block.kind == "fixed-effect":
            for index in range(block.start, block.stop):
                marginals[display_name(model, labels[index])] = result.latent_marginals[index]
    for decl, marginal in zip(model.hypers, result.hyper_marginals):
        marginals[display_name(model, decl.name)] = marginal
    return marginals


def _write_requested_outputs(result: FitResult, spec: ModelSpec, run_dir: Path, priors: bool, seed: int) -> list[str]:
    outputs = spec.outputs
    written: list[str] = []
    baseline = outputs.get("baseline")
    if baseline:
        log10 = bool(baseline.get("log10", False)) if isinstance(baseline, dict) else False
        for name, table in baseline_curve(result, log10=log10).items():
            written.append(write_curve(table, f"baseline_{name}", run_dir))
    if "cif" in outputs:
        request = outputs["cif"]
        table = cif(
            result,
            request.get("profile", {}),
            request.get("times", [1.0]),
            step=request.get("step"),
            method=request.get("method", "exact"),
            samples=int(request.get("samples", 0)),
            seed=seed,
        )
        written.append(write_curve(table, "cif", run_dir))
    if "transition_probs" in outputs:
        request = outputs["transition_probs"]
        table = transition_probs(
            result,
            request.get("profile", {}),
            request.get("times", [1.0]),
            step=request.get("step"),
            scheme=request.get("scheme", "fixed-end"),
            samples=int(request.get("samples", 0)),
            seed=seed,
        )
        written.append(write_curve(table, "transition_probs", run_dir))
    if "hazard" in outputs:
        request = outputs["hazard"]
        submodel = request.get("submodel", "S1")
        times = np.asarray(request.get("times", [1.0]), dtype=float)
        values = hazard_eval(result, submodel, request.get("profile", {}), times)
        written.append(write_curve(pd.DataFrame({"time": times, "hazard": values}), f"hazard_{submodel}", run_dir))
    if "cure_fraction" in outputs:
        summary = cure_fraction(result, outputs["cure_fraction"].get("profile", {}), seed=seed)
        written.append(write_json(run_dir / "cure_fraction.json", summary))
    if outputs.get("gumbel"):
        table, _ = gumbel_convert(result)
        written.append(write_json(run_dir / "gumbel.json", table.to_dict()))
    if priors or outputs.get("prior_vs_posterior"):
        written.append(write_prior_posterior(prior_vs_posterior(result), run_dir))
    return written


def run_fit(
    spec_path: str,
    data: list[str],
    output_root: str,
    seed: int = 0,
    samples: int = 0,
    strategy: str | None = None,
    hr: bool = False,
    sdcor: bool = False,
    priors: bool = False,
    keep_config: bool = False,
    config_dir: str | None = None,
) -> tuple[str, int]:
    started = time.perf_counter()
    soft: list[str] = []
    spec, datasets, config = _load_inputs(spec_path, data, config_dir, soft)
    model = assemble(spec, datasets, config)
    chosen = strategy or spec.strategy
    result = fit(model, strategy=chosen, seed=seed, keep_config=keep_config)
    table = summarise(result, hr=hr, sdcor=sdcor)

    run_dir = make_run_dir(output_root, spec.name)
    shutil.copyfile(spec_path, run_dir / "spec.json")

    tp = result.theta_posterior
    write_summary(
        table,
        run_dir,
        extra={"model": spec.name, "strategy": tp.strategy, "hr": hr, "sdcor": sdcor},
    )
    write_json(
        run_dir / "diagnostics.json",
        {
            "strategy": tp.strategy,
            "theta_points": int(tp.points.shape[0]),
            "theta_mode": {display_name(model, decl.name): float(v) for decl, v in zip(model.hypers, tp.mode)},
            "warnings": result.warnings,
        },
    )
    write_json(run_dir / "priors.json", result.priors)
    write_marginals(_marginals_to_write(result), run_dir)
    curves = _write_requested_outputs(result, spec, run_dir, priors, seed)
    if samples > 0:
        write_samples(sample_hyperpar(result, samples, seed), "hyperpar", run_dir)

    all_warnings = [*soft, *result.warnings]
    summary_lines = [
        f"app_version: {APP_VERSION}",
        f"spec: {spec_path}",
        f"model: {spec.name}",
        f"strategy: {tp.strategy}",
        f"theta_points: {tp.points.shape[0]}",
        f"latent_size: {model.n_latent}",
        f"hyper_count: {model.n_hyper}",
        f"data_rows: {model.n_rows}",
        f"curves_written: {len(curves)}",
        f"wall_time_seconds: {time.perf_counter() - started:.3f}",
        f"warnings_count: {len(all_warnings)}",
        "warnings_first_50:",
    ]
    summary_lines.extend(f"- {warning}" for warning in all_warnings[:50])
    (run_dir / "run_summary.txt").write_text("\n".join(summary_lines) + "\n", encoding="utf-8")

    return str(run_dir), len(all_warnings)


def run_oracle(args: argparse.Namespace) -> dict[str, Any]:
    soft: list[str] = []
    spec, datasets, config = _load_inputs(args.spec, args.data, args.config_dir, soft)
    model = assemble(spec, datasets, config)
    if args.oracle_command == "quad":
        result = quad_posterior(model, resolution=args.resolution)
        names = model.latent_labels()
        return {
            "log_evidence": result.log_evidence,
            "latent": {display_name(model, n): m.summary for n, m in zip(names, result.latent)},
            "hyper": {display_name(model, d.name): m.summary for d, m in zip(model.hypers, result.hyper)},
        }
    rng = np.random.default_rng(args.seed)
    centre = starting_point(model)
    errors = {"gradient_error": 0.0, "hessian_error": 0.0}
    for _ in range(args.points):
        x = model.prior_mean + 0.1 * rng.standard_normal(model.n_latent)
        theta = centre + 0.1 * rng.standard_normal(model.n_hyper)
        check = fd_check(model, x, theta, h=args.h)
        errors = {key: max(errors[key], check[key]) for key in errors}
    return errors


def main() -> int:
    parser = _build_parser()
    args = parser.parse_args()

    try:
        if args.restore_configs:
            for path in restore_default_configs(str(_base_dir())):
                print(f"RESTORED: {path}")
            return 0
        if args.command is None:
            parser.print_help()
            return 2

        if args.command == "inspect":
            report = inspect_run(args.run_dir)
            print(f"FILES CHECKED: {len(report.files_checked)}")
            for problem in report.problems:
                print(f"PROBLEM: {problem}")
            return 0 if report.ok else 1

        if args.command == "oracle":
            print(json.dumps(run_oracle(args), indent=2))
            return 0

        if args.validate_only:
            soft = run_validate(args.spec, args.data, args.config_dir)
            print(f"VALID: {args.spec}")
            print(f"WARNINGS: {len(soft)}")
            for warning in soft:
                print(f"- {warning}")
            return 0

        output_dir, warnings_count = run_fit(
            spec_path=args.spec,
            data=args.data,
            output_root=args.out,
            seed=args.seed,
            samples=args.samples,
            strategy=args.strategy,
            hr=args.hr,
            sdcor=args.sdcor,
            priors=args.priors,
            keep_config=args.keep_config,
            config_dir=args.config_dir,
        )

        print(f"OUTPUT DIR: {output_dir}")
        print(f"WARNINGS: {warnings_count}")
        return 0
    except ConfigError as exc:
        print(f"CONFIG ERROR: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        print(f"RUNTIME ERROR: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
