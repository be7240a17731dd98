"""
Command-line interface.

gen-signal, simulate, extract, train, eval, infer and serve. Toolkit
errors become exit codes: 2 invalid input, 3 missing modality, 4 numeric
failure.
"""

import functools
import logging
import os
from pathlib import Path
from typing import Optional

import typer
import uvicorn
from rich.console import Console
from rich.logging import RichHandler
from rich.progress import Progress, SpinnerColumn, TextColumn
from rich.table import Table

from app.models.network import Route
from app.models.training import CheckpointMeta, Split
from app.services.channel_sim import build_dataset, random_device_response, read_png
from app.services.checkpoint import save_checkpoint
from app.services.config import dump_config, flatten_config, load_config
from app.services.dataset import load_manifest
from app.services.echo_pipeline import build_pipeline_config, trace_pipeline
from app.services.errors import M3FASError
from app.services.signal_gen import assemble_probe_signal, read_wav, write_wav
from app.services.trainer import evaluate, infer, load_model, train

app = typer.Typer(help="Echo-face anti-spoofing toolkit")
console = Console()
logger = logging.getLogger("app.cli")

ConfigOption = typer.Option(None, "--config", "-c", help="Flat key=value config file")


def _setup_logging(verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(message)s",
        handlers=[RichHandler(console=console, show_path=False)],
        force=True,
    )


def handle_errors(fn):
    """Print toolkit errors and exit with their category's code."""
    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except M3FASError as e:
            console.print(f"[bold red]Error:[/bold red] {e}")
            raise typer.Exit(code=e.exit_code)
    return wrapper


@app.callback()
def main(verbose: bool = typer.Option(False, "--verbose", "-v", help="Debug logging")):
    _setup_logging(verbose)


@app.command("gen-signal")
@handle_errors
def gen_signal(
    out: Path = typer.Option(..., "--out", "-o", help="WAV file to write"),
    config: Optional[Path] = ConfigOption,
):
    """Write the probe signal (pilot + nine chirps) as 16-bit WAV."""
    cfg = load_config(config)
    probe = assemble_probe_signal(cfg.signal)
    write_wav(probe, out)
    console.print(
        f"[bold green]Success![/bold green] {len(probe)} samples "
        f"({probe.duration_s:.3f} s at {probe.sample_rate} Hz) written to {out}"
    )


@app.command()
@handle_errors
def simulate(
    out: Path = typer.Option(..., "--out", "-o", help="Dataset directory"),
    n_per_class: int = typer.Option(100, "--n", "-n", help="Samples per class and device"),
    devices: int = typer.Option(2, "--devices", help="Number of simulated devices"),
    seed: int = typer.Option(0, "--seed"),
    config: Optional[Path] = ConfigOption,
):
    """Generate a synthetic paired image/recording dataset."""
    cfg = load_config(config)
    probe = assemble_probe_signal(cfg.signal)
    responses = [random_device_response(d, cfg.sim, seed) for d in range(devices)]
    with Progress(SpinnerColumn(), TextColumn("[progress.description]{task.description}"), transient=True) as progress:
        progress.add_task(description=f"Simulating {2 * n_per_class * devices} samples...", total=None)
        manifest = build_dataset(n_per_class, responses, probe, cfg.sim, seed, out)
    (out / "config.conf").write_text(dump_config(cfg))
    console.print(f"[bold green]Success![/bold green] {len(manifest)} samples in {out}")


@app.command()
@handle_errors
def extract(
    wav: Path = typer.Option(..., "--wav", help="Recording to preprocess"),
    out: Optional[Path] = typer.Option(None, "--out", "-o", help="Save the spectrogram as a tensor container"),
    config: Optional[Path] = ConfigOption,
):
    """Run the echo pipeline on one recording and report every stage."""
    cfg = load_config(config)
    pipeline = build_pipeline_config(cfg.signal, cfg.pipeline)
    trace = trace_pipeline(read_wav(wav), pipeline)

    table = Table(title=f"Echo pipeline: {wav.name}")
    table.add_column("Stage")
    table.add_column("Result")
    table.add_row("pilot index", str(trace.pilot_index))
    table.add_row("clip length", str(trace.clips.clip_length))
    table.add_row("face echo position", str(trace.face_echo.per_clip_position))
    table.add_row("echo samples", str(len(trace.face_echo.echo)))
    table.add_row("spectrogram", "x".join(str(d) for d in trace.spectrogram.shape))
    console.print(table)
    if out is not None:
        save_checkpoint(out, {"spectrogram": trace.spectrogram.magnitudes}, CheckpointMeta(config=flatten_config(cfg)))
        console.print(f"Spectrogram saved to {out}")


@app.command("train")
@handle_errors
def train_cmd(
    data: Path = typer.Option(..., "--data", "-d", help="Dataset directory"),
    out: Path = typer.Option(..., "--out", "-o", help="Checkpoint to write"),
    config: Optional[Path] = ConfigOption,
    log: Optional[Path] = typer.Option(None, "--log", help="Epoch JSONL log"),
):
    """Train on a dataset and save the best-validation checkpoint."""
    cfg = load_config(config)
    result = train(load_manifest(data), cfg, out, log)
    console.print(
        f"[bold green]Success![/bold green] best epoch {result.meta.epoch}, "
        f"validation HTER {result.meta.best_hter:.4f} ({result.meta.selection_head}); saved {out}"
    )


@app.command("eval")
@handle_errors
def eval_cmd(
    ckpt: Path = typer.Option(..., "--ckpt", help="Checkpoint"),
    data: Path = typer.Option(..., "--data", "-d", help="Dataset directory"),
    split: Split = typer.Option(Split.TEST, "--split"),
    distortion: Optional[str] = typer.Option(None, "--distortion", help="gaussian_blur, white_noise or pink_noise"),
    level: float = typer.Option(0.0, "--level", help="Distortion level"),
    out: Optional[Path] = typer.Option(None, "--out", "-o", help="Write the TSV report here"),
):
    """Print the metric report (TSV) of every head on one split."""
    report = evaluate(load_model(ckpt), load_manifest(data), split, distortion, level)
    tsv = report.to_tsv()
    if out is not None:
        out.write_text(tsv)
    typer.echo(tsv, nl=False)
    if report.skipped:
        typer.echo(
            f"Warning: {len(report.skipped)} row(s) failed preprocessing and were left out: "
            + ", ".join(report.skipped),
            err=True,
        )


@app.command("infer")
@handle_errors
def infer_cmd(
    ckpt: Path = typer.Option(..., "--ckpt", help="Checkpoint"),
    route: str = typer.Option("f", "--route", "-r", help="v, a or f"),
    image: Optional[Path] = typer.Option(None, "--image", help="PNG face image"),
    wav: Optional[Path] = typer.Option(None, "--wav", help="Recorded WAV"),
    fallback: bool = typer.Option(False, "--fallback", help="Use the vision route if the recording fails"),
):
    """Score one sample; higher is more bonafide."""
    try:
        chosen = Route.parse(route)
    except ValueError:
        console.print(f"[bold red]Error:[/bold red] unknown route '{route}'")
        raise typer.Exit(code=2)
    loaded = load_model(ckpt)
    result = infer(
        loaded,
        read_png(image) if image is not None else None,
        read_wav(wav) if wav is not None else None,
        chosen,
        fallback=fallback,
    )
    for head, score in result.scores.items():
        typer.echo(f"{head}\t{score:.6f}")
    if result.fallback:
        console.print(f"[yellow]Fallback:[/yellow] {result.fallback_reason}")


@app.command()
def serve(
    ckpt: Path = typer.Option(..., "--ckpt", help="Checkpoint"),
    host: str = typer.Option("127.0.0.1", "--host"),
    port: int = typer.Option(8000, "--port"),
):
    """Start the inference API."""
    os.environ["M3FAS_CHECKPOINT"] = str(ckpt)
    uvicorn.run("app.main:app", host=host, port=port)


if __name__ == "__main__":
    app()
