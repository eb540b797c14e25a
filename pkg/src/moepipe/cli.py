"""``moepipe`` command line."""
from __future__ import annotations

import sys
from pathlib import Path

import click

from .config import ScenarioError, load_scenario
from .kernels import CalibrationError, default_kernel_models, load_kernel_models
from .optimizer import SMAllocationError, format_decision
from .report import FORMATS, emit_table, parse_sweep, run_experiment, sweep_points
from .sim import format_trace


def _fail(message: str) -> None:
    click.echo(f"error: {message}", err=True)


@click.group()
@click.version_option(package_name="artifact")
def main() -> None:
    """Simulate expert-parallel MoE inference layers."""


@main.command()
@click.option("--scenario", "scenarios", multiple=True, required=True,
              type=click.Path(dir_okay=False, path_type=Path), help="Scenario YAML (repeatable).")
@click.option("--calibration", type=click.Path(dir_okay=False, exists=True, path_type=Path),
              help="Kernel calibration document; defaults to the shipped fixture.")
@click.option("--sweep", "sweeps", multiple=True, metavar="KEY=V1,V2",
              help="Sweep a knob: pn, sm, comm_sm, gemm, strategy, tokens, overlap (repeatable).")
@click.option("--emit", type=click.Choice(["table", "trace", "decision"]), default="table",
              show_default=True)
@click.option("--format", "fmt", type=click.Choice(FORMATS), default="text", show_default=True)
@click.option("--seed", type=int, default=None, help="Override the scenario routing seed.")
@click.option("--output", "-o", type=click.Path(dir_okay=False, path_type=Path),
              help="Write to a file instead of stdout.")
def run(scenarios, calibration, sweeps, emit, fmt, seed, output) -> None:
    """Run scenarios and emit results, traces or decision reports."""
    try:
        kernels = load_kernel_models(calibration.read_text()) if calibration else default_kernel_models()
        parsed_sweeps = [parse_sweep(s) for s in sweeps]
    except (CalibrationError, ValueError, OSError) as exc:
        _fail(str(exc))
        sys.exit(2)

    results, chunks, failed = [], [], []
    for path in scenarios:
        try:
            spec = load_scenario(path)
            if seed is not None:
                spec = spec.with_workload(random_seed=seed)
            for labels, point in sweep_points(spec, parsed_sweeps):
                result, sim = run_experiment(point, kernels, sweep=labels)
                results.append(result)
                header = f"# scenario={result.scenario_id}"
                if labels:
                    header += " " + " ".join(f"{k}={v}" for k, v in labels)
                if emit == "trace":
                    chunks.append(header + "\n" + format_trace(sim.trace))
                elif emit == "decision":
                    chunks.append(header + "\n" + format_decision(result.decision))
        except FileNotFoundError as exc:
            failed.append(f"{path}: cannot read scenario: {exc.strerror}")
        except (ScenarioError, SMAllocationError, ValueError) as exc:
            failed.append(f"{path}: {exc}")

    if results:
        text = emit_table(results, fmt) if emit == "table" else "".join(chunks)
        if output:
            output.write_text(text)
        else:
            click.echo(text, nl=False)
    for msg in failed:
        _fail(msg)
    if failed:
        sys.exit(1)


if __name__ == "__main__":  # pragma: no cover
    main()
