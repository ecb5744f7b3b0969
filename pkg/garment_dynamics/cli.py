#!/usr/bin/env python3
"""
garment-dynamics command line.

Commands:
    simulate   Generate a synthetic mass-spring corpus
    train      Fit a transformer on a corpus (teacher forcing)
    rollout    Auto-regressive prediction from a warm-started sequence
    eval       Compare a rollout archive with ground truth
    geodesics  Precompute and cache rest-mesh geodesic fields
    inspect    Summarize an OBJ mesh, sequence archive, corpus or checkpoint
    docs       Render the command reference page

Examples:
    garment-dynamics simulate corpus/ --frames 100
    garment-dynamics train corpus/ runs/skirt --steps 2000 --config desk.toml
    garment-dynamics rollout runs/skirt/checkpoint.pt corpus/skirt_orbit pred/ --frames 20
    garment-dynamics eval pred/ corpus/skirt_orbit --report report.md
"""

import logging
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

import click
import numpy as np
import questionary
import torch
import typer
from jinja2 import Environment, FileSystemLoader, select_autoescape
from pydantic import ValidationError
from rich.console import Console
from rich.logging import RichHandler
from rich.panel import Panel
from rich.progress import BarColumn, MofNCompleteColumn, Progress, SpinnerColumn, TextColumn, TimeElapsedColumn
from rich.table import Table
from typing_extensions import Annotated

from .archive import (
    CORPUS_MANIFEST_NAME,
    MANIFEST_NAME,
    SequenceData,
    cached_geodesic_field,
    load_mesh,
    read_corpus,
    read_sequence,
    write_sequence,
)
from .errors import EXIT_CODES, ConfigError, GarmentDynamicsError
from .evaluation import evaluate, render_report
from .model import load_checkpoint
from .pipeline import STAGES, NetworkPredictor, colliders_for, rollout, start_from_sequence
from .settings import Settings, load_settings
from .simdata import default_corpus_specs, make_corpus
from .trainer import build_dataset, train

logger = logging.getLogger(__name__)

# Rich console for user-facing output (tables, panels, progress bars)
console = Console()
err_console = Console(stderr=True)
app = typer.Typer(
    name="garment-dynamics",
    help="Learned garment dynamics on triangle meshes",
    add_completion=False,
)

TEMPLATES_DIR = Path(__file__).parent / "templates"
ENV_PREFIX = "GARMENT_DYNAMICS_"

ConfigOption = Annotated[Optional[Path], typer.Option("--config", "-c", help="TOML configuration file")]
ThreadsOption = Annotated[Optional[int], typer.Option("--threads", help="Worker threads (1 = deterministic)")]


def configure_logging(level: str):
    logging.basicConfig(
        level=level.upper(),
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(rich_tracebacks=True, markup=True, console=err_console)],
        force=True,
    )


def _overrides(**sections: Dict[str, Any]) -> Dict[str, Any]:
    """Drop unset flags so lower-priority sources keep their values."""
    result: Dict[str, Any] = {}
    for key, value in sections.items():
        if isinstance(value, dict):
            value = {k: v for k, v in value.items() if v is not None}
            if value:
                result[key] = value
        elif value is not None:
            result[key] = value
    return result


def _settings(config: Optional[Path], **overrides) -> Settings:
    settings = load_settings(config, **_overrides(**overrides))
    configure_logging(settings.log_level)
    return settings


def _fail(category: str, message: str):
    err_console.print(f"error[{category}]: {message}", markup=False, highlight=False, soft_wrap=True)
    raise typer.Exit(EXIT_CODES.get(category, 1))


def _guarded(command: Callable[[], None]):
    try:
        command()
    except GarmentDynamicsError as e:
        _fail(e.category, str(e))
    except ValidationError as e:
        _fail("usage", f"Invalid configuration: {e}")


def _progress() -> Progress:
    return Progress(
        SpinnerColumn(),
        TextColumn("[progress.description]{task.description}"),
        BarColumn(),
        MofNCompleteColumn(),
        TimeElapsedColumn(),
        console=console,
    )


def _confirm_overwrite(path: Path, force: bool) -> bool:
    if force or not path.exists() or not any(path.iterdir()):
        return True
    return bool(questionary.confirm(f"{path} is not empty. Overwrite its sequences?", default=False).ask())


@app.command()
def simulate(
    output: Annotated[Path, typer.Argument(help="Corpus output directory")],
    config: ConfigOption = None,
    frames: Annotated[int, typer.Option("--frames", min=2, help="Frames per sequence")] = 100,
    resolution: Annotated[int, typer.Option("--resolution", min=1, help="Garment mesh refinement level")] = 1,
    sequence: Annotated[
        Optional[List[str]], typer.Option("--sequence", "-s", help="Only simulate the named sequences")
    ] = None,
    seed: Annotated[Optional[int], typer.Option("--seed", help="Simulation seed")] = None,
    substeps: Annotated[Optional[int], typer.Option("--substeps", help="Integrator substeps per frame")] = None,
    threads: ThreadsOption = None,
    force: Annotated[bool, typer.Option("--force", help="Skip confirmation prompts")] = False,
):
    """Simulate the synthetic garment corpus with the mass-spring integrator."""

    def run():
        settings = _settings(config, sim={"seed": seed, "substeps": substeps}, threads=threads)
        specs = default_corpus_specs(n_frames=frames, resolution=resolution)
        if sequence:
            unknown = sorted(set(sequence) - {s.name for s in specs})
            if unknown:
                raise ConfigError(f"Unknown sequence(s): {', '.join(unknown)}")
            specs = [s for s in specs if s.name in sequence]
        if not _confirm_overwrite(output, force):
            console.print("[yellow]Cancelled by user[/yellow]")
            return

        with _progress() as progress:
            task = progress.add_task(f"Simulating {len(specs)} sequences", total=len(specs))
            manifest = make_corpus(
                specs,
                settings.sim,
                output,
                threads=settings.threads,
                on_sequence=lambda name: progress.advance(task),
            )

        table = Table(title=f"Corpus {output}")
        table.add_column("Sequence", style="cyan")
        table.add_column("Frames", justify="right")
        table.add_column("Faces", justify="right")
        for entry in manifest.sequences:
            table.add_row(entry.name, str(entry.n_frames), str(entry.n_faces))
        console.print(table)

    _guarded(run)


@app.command("train")
def train_command(
    corpus: Annotated[Path, typer.Argument(help="Corpus or sequence archive directory")],
    output: Annotated[Path, typer.Argument(help="Run directory for checkpoint.pt and metrics.jsonl")],
    config: ConfigOption = None,
    steps: Annotated[Optional[int], typer.Option("--steps", help="Optimizer steps")] = None,
    batch_size: Annotated[Optional[int], typer.Option("--batch-size", help="Windows per step")] = None,
    learning_rate: Annotated[Optional[float], typer.Option("--learning-rate", help="Adam step size")] = None,
    seed: Annotated[Optional[int], typer.Option("--seed", help="Training seed")] = None,
    n_conn: Annotated[Optional[int], typer.Option("--n-conn", help="Geodesic attention heads")] = None,
    p_geo: Annotated[Optional[float], typer.Option("--p-geo", help="Geodesic attention exponent")] = None,
    n_hist: Annotated[Optional[int], typer.Option("--n-hist", help="History length")] = None,
    resume: Annotated[Optional[Path], typer.Option("--resume", help="Continue from a checkpoint")] = None,
    float64: Annotated[bool, typer.Option("--float64", help="Train in 64-bit floats")] = False,
    threads: ThreadsOption = None,
):
    """Train the manifold-aware transformer with single-step supervision."""

    def run():
        settings = _settings(
            config,
            train={"steps": steps, "batch_size": batch_size, "learning_rate": learning_rate, "seed": seed},
            model={"n_conn": n_conn, "p_geo": p_geo, "n_hist": n_hist},
            threads=threads,
        )
        sequences = read_corpus(corpus, degenerate_area=settings.geometry.degenerate_area)
        console.print(f"[cyan]Preparing {len(sequences)} sequences from {corpus}[/cyan]")
        dataset = build_dataset(
            sequences,
            settings.model,
            geodesic_cache=Path(settings.geometry.geodesic_cache_dir),
            geodesic_scale=settings.geometry.geodesic_scale,
            threads=settings.threads,
        )
        metadata = {
            "corpus": str(corpus),
            "sequences": [s.name for s in sequences],
            "geodesic_scale": settings.geometry.geodesic_scale,
        }
        with _progress() as progress:
            task = progress.add_task("Training", total=settings.train.steps)
            result = train(
                dataset,
                settings.model,
                settings.train,
                output,
                resume=resume,
                metadata=metadata,
                dtype=torch.float64 if float64 else torch.float32,
                threads=settings.threads,
                on_step=lambda step, record: progress.update(
                    task, completed=step, description=f"Training (loss {record['loss']:.4f})"
                ),
            )

        final = result.history[-1]["loss"] if result.history else float("nan")
        console.print(
            Panel.fit(
                f"Windows: {len(dataset)}\nFinal loss: {final:.5f}\n"
                f"Checkpoint: {result.checkpoint}\nMetrics: {result.metrics_log}",
                title="Training complete",
                border_style="green",
            )
        )

    _guarded(run)


@app.command("rollout")
def rollout_command(
    checkpoint: Annotated[Path, typer.Argument(help="Trained checkpoint")],
    sequence: Annotated[Path, typer.Argument(help="Ground-truth sequence archive (warm start and colliders)")],
    output: Annotated[Path, typer.Argument(help="Archive directory for the predicted frames")],
    config: ConfigOption = None,
    start: Annotated[int, typer.Option("--start", min=0, help="First warm-start frame")] = 0,
    frames: Annotated[Optional[int], typer.Option("--frames", min=1, help="Frames to predict")] = None,
    no_refine: Annotated[bool, typer.Option("--no-refine", help="Skip collision refinement")] = False,
    no_svd_replace: Annotated[
        bool, typer.Option("--no-svd-replace", help="Use composed gradients without singular-value replacement")
    ] = False,
):
    """Predict garment frames auto-regressively with the trained network."""

    def run():
        settings = _settings(config, use_svd_replace=False if no_svd_replace else None)
        ckpt = load_checkpoint(checkpoint)
        predictor = NetworkPredictor(ckpt)
        seq = read_sequence(sequence, degenerate_area=settings.geometry.degenerate_area)
        n_hist = ckpt.config.n_hist
        current = start + n_hist - 1
        available = seq.n_frames - current - 1
        n_frames = available if frames is None else frames
        if n_frames < 1 or n_frames > available:
            raise ConfigError(
                f"Sequence {seq.name} has {seq.n_frames} frames; warm start at {start} leaves "
                f"{available} frames to predict, {n_frames} requested"
            )

        colliders = colliders_for(seq)
        geodesics = None
        if predictor.uses_geodesics:
            scale = ckpt.metadata.get("geodesic_scale", settings.geometry.geodesic_scale)
            geodesics = cached_geodesic_field(
                seq.garment_rest, Path(settings.geometry.geodesic_cache_dir), scale, settings.threads
            )
        state = start_from_sequence(seq, n_hist, start, colliders=colliders, geodesics=geodesics)
        refine_config = None if no_refine else settings.refine

        with _progress() as progress:
            task = progress.add_task(f"Rolling out {seq.name}", total=n_frames)
            result = rollout(
                state,
                predictor,
                colliders[current : current + n_frames + 1],
                n_frames,
                use_svd_replace=settings.use_svd_replace,
                refine_config=refine_config,
                on_frame=lambda k: progress.advance(task),
            )

        first = current + 1
        timings = result.mean_timings()
        predicted = SequenceData(
            name=f"{seq.name}_rollout",
            garment_rest=seq.garment_rest,
            garment_frames=result.frames,
            fps=seq.fps,
            body_rest=seq.body_rest,
            body_frames=seq.body_frames[first : first + n_frames],
            pinned=seq.pinned,
            config={"refine": None if refine_config is None else refine_config.model_dump()},
            metadata={
                "source": seq.name,
                "checkpoint": str(checkpoint),
                "first_frame": first,
                "use_svd_replace": settings.use_svd_replace,
                "timings": timings,
            },
        )
        write_sequence(output, predicted)

        table = Table(title="Mean stage time per frame")
        table.add_column("Stage", style="cyan")
        table.add_column("Seconds", justify="right")
        for stage in STAGES:
            table.add_row(stage, f"{timings[stage]:.4f}")
        console.print(table)
        console.print(f"[green]✓ {n_frames} frames written to {output}[/green]")

    _guarded(run)


@app.command("eval")
def eval_command(
    predicted: Annotated[Path, typer.Argument(help="Rollout archive")],
    ground_truth: Annotated[Path, typer.Argument(help="Ground-truth sequence archive")],
    config: ConfigOption = None,
    pairs: Annotated[Optional[int], typer.Option("--pairs", help="Face pairs for geodesic distortion")] = None,
    samples: Annotated[Optional[int], typer.Option("--samples", help="Surface samples for Chamfer")] = None,
    report: Annotated[Optional[Path], typer.Option("--report", help="Write a Markdown report")] = None,
    json_output: Annotated[Optional[Path], typer.Option("--json", help="Write the report as JSON")] = None,
):
    """Score a rollout: vertex error, Chamfer distance, geodesic distortion, penetration."""

    def run():
        settings = _settings(config, eval={"geodesic_pairs": pairs, "chamfer_samples": samples})
        area = settings.geometry.degenerate_area
        pred = read_sequence(predicted, degenerate_area=area)
        gt = read_sequence(ground_truth, degenerate_area=area)
        first = int(pred.metadata.get("first_frame", 0))
        if first + pred.n_frames > gt.n_frames:
            raise ConfigError(
                f"Rollout covers frames {first}..{first + pred.n_frames - 1}; ground truth has {gt.n_frames}"
            )
        colliders = colliders_for(pred) if pred.body_rest is not None else None
        result = evaluate(
            gt.garment_rest,
            pred.garment_frames,
            gt.garment_frames[first : first + pred.n_frames],
            settings.eval,
            colliders=colliders,
            timings=pred.metadata.get("timings"),
            first_frame=first,
        )

        table = Table(title=f"{pred.name} vs {gt.name}")
        table.add_column("Metric", style="cyan")
        table.add_column("Value", justify="right")
        table.add_row("Frames", str(result.n_frames))
        table.add_row("Mean vertex error (cm)", f"{result.mve_cm:.4f}")
        table.add_row("Chamfer (m²)", f"{result.chamfer:.3e}")
        table.add_row("Geodesic distortion (m)", f"{result.geodesic_distortion:.3e}")
        if result.penetration is not None:
            table.add_row("Max penetrating vertices", str(result.penetration.max_vertices))
            table.add_row("Max penetration (m)", f"{result.penetration.max_depth:.3e}")
        console.print(table)

        if report is not None:
            report.write_text(render_report(result, title=f"{pred.name} vs {gt.name}"), encoding="utf-8")
            console.print(f"[green]✓ Report written to {report}[/green]")
        if json_output is not None:
            json_output.write_text(result.model_dump_json(indent=2) + "\n", encoding="utf-8")

    _guarded(run)


@app.command()
def geodesics(
    source: Annotated[Path, typer.Argument(help="OBJ mesh, sequence archive or corpus")],
    config: ConfigOption = None,
    cache_dir: Annotated[Optional[str], typer.Option("--cache-dir", help="Cache directory")] = None,
    scale: Annotated[Optional[float], typer.Option("--scale", help="Geodesic distance divisor")] = None,
    threads: ThreadsOption = None,
):
    """Precompute rest-mesh geodesic fields into the cache."""

    def run():
        settings = _settings(
            config, geometry={"geodesic_cache_dir": cache_dir, "geodesic_scale": scale}, threads=threads
        )
        area = settings.geometry.degenerate_area
        if source.suffix.lower() == ".obj":
            meshes = {source.stem: load_mesh(source, area)}
        else:
            meshes = {s.name: s.garment_rest for s in read_corpus(source, verify=False, degenerate_area=area)}

        cache = Path(settings.geometry.geodesic_cache_dir)
        table = Table(title=f"Geodesic cache {cache}")
        table.add_column("Mesh", style="cyan")
        table.add_column("Faces", justify="right")
        table.add_column("Max distance", justify="right")
        table.add_column("Unreachable pairs", justify="right")
        with _progress() as progress:
            task = progress.add_task("Computing geodesics", total=len(meshes))
            for name, mesh in meshes.items():
                field = cached_geodesic_field(mesh, cache, settings.geometry.geodesic_scale, settings.threads)
                finite = np.isfinite(field.D)
                table.add_row(
                    name,
                    str(mesh.n_faces),
                    f"{field.D[finite].max():.4f}",
                    str(int((~finite).sum())),
                )
                progress.advance(task)
        console.print(table)

    _guarded(run)


def _mesh_table(title: str, mesh) -> Table:
    table = Table(title=title)
    table.add_column("Property", style="cyan")
    table.add_column("Value", justify="right")
    table.add_row("Vertices", str(mesh.n_vertices))
    table.add_row("Faces", str(mesh.n_faces))
    table.add_row("Euler characteristic", str(mesh.euler_characteristic))
    table.add_row("Components", str(len(np.unique(mesh.vertex_components()))))
    table.add_row("Mean edge length", f"{mesh.mean_edge_length:.5f}")
    table.add_row("Bounding-box diagonal", f"{mesh.bbox_diagonal:.5f}")
    return table


@app.command()
def inspect(
    path: Annotated[Path, typer.Argument(help="OBJ mesh, sequence archive, corpus or checkpoint")],
    config: ConfigOption = None,
):
    """Print a summary of a mesh, sequence archive, corpus or checkpoint."""

    def run():
        configure_logging("WARNING")
        area = load_settings(config).geometry.degenerate_area
        if not path.exists():
            raise ConfigError(f"No such file or directory: {path}")
        if path.suffix.lower() == ".obj":
            console.print(_mesh_table(str(path), load_mesh(path, area)))
        elif path.suffix == ".pt":
            ckpt = load_checkpoint(path)
            table = Table(title=f"Checkpoint {path}")
            table.add_column("Property", style="cyan")
            table.add_column("Value", justify="right")
            for key, value in ckpt.config.model_dump().items():
                table.add_row(key, str(value))
            table.add_row("parameters", f"{ckpt.model.parameter_count():,}")
            table.add_row("token dim", str(ckpt.norm_stats.dim))
            table.add_row("step", str(ckpt.metadata.get("step", "-")))
            console.print(table)
        elif (path / MANIFEST_NAME).is_file():
            seq = read_sequence(path, degenerate_area=area)
            console.print(_mesh_table(f"Sequence {seq.name} garment", seq.garment_rest))
            console.print(
                f"Frames: {seq.n_frames} at {seq.fps:g} fps, pinned vertices: {len(seq.pinned)}, "
                f"body: {'none' if seq.body_rest is None else f'{seq.body_rest.n_faces} faces'}"
            )
        elif (path / CORPUS_MANIFEST_NAME).is_file():
            table = Table(title=f"Corpus {path}")
            table.add_column("Sequence", style="cyan")
            table.add_column("Frames", justify="right")
            table.add_column("Faces", justify="right")
            table.add_column("Vertices", justify="right")
            for seq in read_corpus(path, degenerate_area=area):
                mesh = seq.garment_rest
                table.add_row(seq.name, str(seq.n_frames), str(mesh.n_faces), str(mesh.n_vertices))
            console.print(table)
        else:
            raise ConfigError(f"Cannot tell what {path} is: expected .obj, .pt, a sequence archive or a corpus")

    _guarded(run)


def command_reference() -> str:
    """CLI reference page rendered from the registered commands."""
    group = typer.main.get_command(app)
    commands = []
    for name, command in sorted(group.commands.items()):
        params = []
        for p in command.params:
            if p.name == "help":
                continue
            kind = "argument" if isinstance(p, click.Argument) else "option"
            label = p.name if kind == "argument" else ", ".join(p.opts)
            default = "" if p.default is None or p.required else f"`{p.default}`"
            params.append({"name": label, "kind": kind, "default": default, "help": getattr(p, "help", "") or ""})
        commands.append({"name": name, "help": (command.help or "").strip(), "params": params})

    env = Environment(
        loader=FileSystemLoader(TEMPLATES_DIR),
        autoescape=select_autoescape(),
        trim_blocks=True,
        lstrip_blocks=True,
    )
    return env.get_template("cli_reference.md.j2").render(
        program=app.info.name,
        env_prefix=ENV_PREFIX,
        exit_codes=EXIT_CODES,
        commands=commands,
    )


@app.command()
def docs(
    output: Annotated[Optional[Path], typer.Option("-o", "--output", help="Write to a file instead of stdout")] = None,
):
    """Render the command reference page."""
    text = command_reference()
    if output is None:
        console.print(text, markup=False, highlight=False, soft_wrap=True)
    else:
        output.write_text(text, encoding="utf-8")
        console.print(f"[green]✓ Reference written to {output}[/green]")


def main():
    """Entry point for script execution."""
    app()


if __name__ == "__main__":
    app()
