# main.py
import hashlib
import logging
import os
import re
import tempfile
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import click
import pandas as pd
import yaml
from dotenv import load_dotenv
from pydantic import BaseModel, ValidationError

from belief import ParameterGrid, surrogate_curve, true_updates
from eval_harness import (
    ALL_METHODS,
    ExperimentConfig,
    ResultTable,
    method_beliefs,
    observed_data,
    run_experiment,
)

load_dotenv()

logger = logging.getLogger("main")
if not logger.handlers:
    h = logging.StreamHandler()
    h.setFormatter(logging.Formatter("%(asctime)s [%(levelname)s] %(message)s"))
    logger.addHandler(h)
    logger.setLevel(os.getenv("LOG_LEVEL", "INFO"))

# ------------------ Config (ENV-driven) ------------------
OUTPUT_DIR = Path(os.getenv("ROBUST_BELIEF_OUTPUT_DIR", "results"))

EXIT_CONFIG = 2
EXIT_PARTIAL = 3


# ------------------ Manifest ------------------
class RunManifest(BaseModel):
    command: str
    config_path: str
    # git blob hash of the config file as read
    config_hash: str
    resolved_config: Dict[str, Any]
    output_dir: str
    started_at: datetime
    finished_at: Optional[datetime] = None
    failed_cells: List[str] = []


def content_hash(data: bytes) -> str:
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        Path(tmp).unlink(missing_ok=True)
        raise


def frame_csv(frame: pd.DataFrame) -> str:
    return frame.to_csv(index=False, float_format="%.10g", lineterminator="\n")


# ------------------ Config loading ------------------
class ConfigLoadError(Exception):
    def __init__(self, problems: Sequence[str]):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


def _line_of(text: str, loc: Tuple[Any, ...]) -> Optional[int]:
    for key in reversed([k for k in loc if isinstance(k, str)]):
        pattern = re.compile(rf"^\s*-?\s*{re.escape(key)}\s*:", re.MULTILINE)
        match = pattern.search(text)
        if match:
            return text.count("\n", 0, match.start()) + 1
    return None


def _set_dotted(raw: Dict[str, Any], dotted: str, value: Any) -> None:
    keys = dotted.split(".")
    node = raw
    for key in keys[:-1]:
        child = node.get(key)
        if not isinstance(child, dict):
            child = {}
            node[key] = child
        node = child
    node[keys[-1]] = value


def _violations(exc: ValidationError, text: str) -> List[str]:
    problems = []
    for err in exc.errors():
        loc = tuple(err["loc"])
        where = ".".join(str(k) for k in loc) or "config"
        line = _line_of(text, loc)
        suffix = f" (line {line})" if line else ""
        msg = err["msg"].removeprefix("Value error, ")
        problems.extend(f"{where}: {part}{suffix}" for part in msg.split("; "))
    return problems


def load_config(path: Path, overrides: Sequence[str] = ()) -> Tuple[ExperimentConfig, bytes]:
    data = path.read_bytes()
    text = data.decode("utf-8")
    try:
        raw = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}" if mark is not None else ""
        raise ConfigLoadError([f"YAML does not parse{where}: {getattr(exc, 'problem', exc)}"]) from exc
    if not isinstance(raw, dict):
        raise ConfigLoadError(["config must be a mapping of ExperimentConfig fields"])

    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep or not key.strip():
            raise ConfigLoadError([f"override '{item}' is not key=value"])
        _set_dotted(raw, key.strip(), yaml.safe_load(value))

    try:
        return ExperimentConfig.model_validate(raw), data
    except ValidationError as exc:
        raise ConfigLoadError(_violations(exc, text)) from exc


def _load_or_exit(ctx: click.Context, path: Path, overrides: Sequence[str]) -> Tuple[ExperimentConfig, bytes]:
    try:
        return load_config(path, overrides)
    except ConfigLoadError as exc:
        click.echo(f"invalid config {path}:", err=True)
        for problem in exc.problems:
            click.echo(f"  - {problem}", err=True)
        ctx.exit(EXIT_CONFIG)


def _resolved(config: ExperimentConfig) -> Dict[str, Any]:
    return config.model_dump(mode="json")


# ------------------ CLI ------------------
@click.group(context_settings={"help_option_names": ["-h", "--help"]})
def cli():
    """Robust generalized belief updates from classifier density-ratio estimates."""


config_option = click.option("--config", "config_path", required=True,
                             type=click.Path(exists=True, dir_okay=False, path_type=Path),
                             help="YAML experiment configuration.")
override_option = click.option("--override", "overrides", multiple=True, metavar="KEY=VALUE",
                               help="Dotted config override, e.g. bayesopt.n_total=40. Repeatable.")


@cli.command("run")
@config_option
@click.option("--output", "output_dir", type=click.Path(file_okay=False, path_type=Path),
              help="Output directory (default $ROBUST_BELIEF_OUTPUT_DIR/<config name>).")
@click.option("--seeds", type=click.IntRange(min=1), help="Run seeds 0..N-1 instead of the configured list.")
@override_option
@click.option("--threads", type=click.IntRange(min=1), envvar="ROBUST_BELIEF_THREADS", default=1,
              show_default=True, help="Worker processes for (seed, method) cells.")
@click.option("--dump-beliefs", is_flag=True, help="Also write every cell's belief grids and traces.")
@click.pass_context
def cmd_run(ctx, config_path: Path, output_dir: Optional[Path], seeds: Optional[int],
            overrides: Tuple[str, ...], threads: int, dump_beliefs: bool):
    """Run every (seed, method) cell and write results.csv."""
    extra = list(overrides) + ([f"seeds={seeds}"] if seeds else [])
    config, data = _load_or_exit(ctx, config_path, extra)
    out = output_dir or OUTPUT_DIR / config_path.stem
    manifest = RunManifest(command="run", config_path=str(config_path), config_hash=content_hash(data),
                           resolved_config=_resolved(config), output_dir=str(out),
                           started_at=datetime.now(timezone.utc))
    write_atomic(out / "manifest.json", manifest.model_dump_json(indent=2))
    logger.info("running %s into %s (config %s, %d threads)", config_path, out, manifest.config_hash[:12], threads)

    table = run_experiment(config, threads=threads, keep_artifacts=dump_beliefs)
    write_atomic(out / "results.csv", table.to_csv())
    write_atomic(out / "results_table.csv", table.pivot_csv())
    if dump_beliefs:
        _dump_cells(out, table, config)
    logger.info("mean JSD by divergence and method:\n%s", table.pivot().to_string(float_format="%.5f"))

    manifest = manifest.model_copy(update={
        "finished_at": datetime.now(timezone.utc),
        "failed_cells": [f"seed={s} method={m}: {cause}" for s, m, cause in table.failures],
    })
    write_atomic(out / "manifest.json", manifest.model_dump_json(indent=2))
    if table.failures:
        click.echo(f"{len(table.failures)} of {len(config.seeds) * len(config.methods)} cells failed:", err=True)
        for line in manifest.failed_cells:
            click.echo(f"  - {line}", err=True)
        ctx.exit(EXIT_PARTIAL)
    logger.info("wrote %s", out / "results.csv")


def _dump_cells(out: Path, table: ResultTable, config: ExperimentConfig) -> None:
    names = list(config.problem.param_names)
    for cell in table.cells:
        if cell.error is not None:
            continue
        stem = f"seed{cell.seed}_{cell.method}"
        for div, belief in (cell.beliefs or {}).items():
            write_atomic(out / "beliefs" / f"{stem}_{div}.csv", frame_csv(belief.to_frame()))
        for key, trace in (cell.traces or {}).items():
            tag = stem if key == "shared" else f"{stem}_{key}"
            write_atomic(out / "traces" / f"{tag}.csv", frame_csv(trace.to_frame(names)))
            write_atomic(out / "traces" / f"{tag}.jsonl",
                         trace.to_records_frame(names).to_json(orient="records", lines=True))


@cli.command("belief")
@config_option
@click.option("--method", type=click.Choice(ALL_METHODS), required=True)
@click.option("--divergence", required=True, help="A configured divergence, e.g. kl or alpha_0.7.")
@click.option("--seed", type=click.IntRange(min=0), default=0, show_default=True)
@click.option("--output", "output_dir", type=click.Path(file_okay=False, path_type=Path))
@override_option
@click.pass_context
def cmd_belief(ctx, config_path: Path, method: str, divergence: str, seed: int,
               output_dir: Optional[Path], overrides: Tuple[str, ...]):
    """Write one belief grid and, for acquisition-based methods, its trace and surrogate curve."""
    config, _ = _load_or_exit(ctx, config_path, overrides)
    try:
        div = config.divergence(divergence)
    except (KeyError, ValueError) as exc:
        click.echo(f"unknown divergence '{divergence}'; configured: {', '.join(config.divergences)}", err=True)
        logger.debug("divergence lookup failed: %s", exc)
        ctx.exit(EXIT_CONFIG)
    out = output_dir or OUTPUT_DIR / config_path.stem
    spec = config.problem
    grid = ParameterGrid.from_spec(spec)
    x_obs = observed_data(config, seed)
    stem = f"{method}_{div.name}_seed{seed}"

    try:
        beliefs, traces = method_beliefs(config, seed, method, x_obs, [div], grid)
    except Exception as exc:
        logger.exception("belief for %s failed", stem)
        click.echo(f"belief for {stem} failed: {exc}", err=True)
        ctx.exit(EXIT_PARTIAL)

    write_atomic(out / f"belief_{stem}.csv", frame_csv(beliefs[div.name].to_frame()))
    trace = traces.get("shared") or traces.get(div.name)
    if trace is not None:
        names = list(spec.param_names)
        write_atomic(out / f"trace_{stem}.csv", frame_csv(trace.to_frame(names)))
        write_atomic(out / f"surrogate_{stem}.csv", frame_csv(surrogate_curve(trace, spec, x_obs, grid)))
    logger.info("wrote belief%s for %s into %s", " and trace" if trace is not None else "", stem, out)


@cli.command("validate")
@config_option
@override_option
@click.pass_context
def cmd_validate(ctx, config_path: Path, overrides: Tuple[str, ...]):
    """Check a config without running it and print the resolved form."""
    config, data = _load_or_exit(ctx, config_path, overrides)
    click.echo(f"# {config_path} ({content_hash(data)[:12]})")
    click.echo(yaml.safe_dump(_resolved(config), sort_keys=False), nl=False)


@cli.command("updates")
@config_option
@click.option("--seed", type=click.IntRange(min=0), default=0, show_default=True)
@click.option("--output", "output_dir", type=click.Path(file_okay=False, path_type=Path))
@override_option
@click.pass_context
def cmd_updates(ctx, config_path: Path, seed: int, output_dir: Optional[Path], overrides: Tuple[str, ...]):
    """Reference belief for every configured divergence on one dataset, against the KL update."""
    config, _ = _load_or_exit(ctx, config_path, overrides)
    out = output_dir or OUTPUT_DIR / config_path.stem
    frame = true_updates(config.problem, config.divergence_specs(), observed_data(config, seed),
                         tempering=config.tempering)
    write_atomic(out / f"updates_seed{seed}.csv", frame_csv(frame))
    logger.info("wrote %s", out / f"updates_seed{seed}.csv")


if __name__ == "__main__":
    cli()
