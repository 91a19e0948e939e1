"""Command-line interface for VL-Reader."""

import functools
import logging
import sys
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional

import click
import numpy as np
from pydantic import ValidationError
from rich import print as rprint
from rich.console import Console
from rich.markup import escape
from rich.panel import Panel
from rich.progress import BarColumn, Progress, SpinnerColumn, TextColumn, TimeElapsedColumn
from rich.table import Table

from . import __version__
from .config import load_run_config
from .errors import VLReaderError
from .experiments import (
    SWEEP_PARAMETERS,
    checkpoint_path,
    run_pretraining_ablation,
    run_ratio_sweep,
    train_two_phase,
)
from .inference import (
    EvalResult,
    evaluate,
    load_reader,
    masked_region_mse,
    mean_pixel_baseline_mse,
    read_records,
    reconstruct_preview,
    save_preview,
    write_report,
)
from .masking import (
    AttentionMask,
    Permutation,
    build_cloze_mask,
    query_text_mask,
    sample_visual_mask,
)
from .models import DEFAULT_CHARSET, LossReport, Phase, RunConfig, VisualizationConfig
from .synthdata import build_dataset, build_splits, load_dataset, parse_corruption_mix, parse_splits
from .textcodec import Charset
from .trainer import read_training_log
from .visualization import TrainingVisualizer

console = Console()
logger = logging.getLogger(__name__)

PHASES = {
    "mvlr": [Phase.MVLR],
    "finetune": [Phase.FINETUNE],
    "both": [Phase.MVLR, Phase.FINETUNE],
}


def _validation_message(error: ValidationError) -> str:
    """Every pydantic error as 'field: message', joined by semicolons."""
    return "; ".join(
        f"{'.'.join(str(part) for part in err['loc']) or 'config'}: {err['msg']}" for err in error.errors()
    )


def handle_errors(func: Callable[..., Any]) -> Callable[..., Any]:
    """Configuration errors exit 2, runtime failures exit 1, each with one red line."""

    @functools.wraps(func)
    def wrapper(*args: Any, **kwargs: Any) -> Any:
        try:
            return func(*args, **kwargs)
        except ValidationError as e:
            console.print(f"[red]Invalid configuration:[/red] {escape(_validation_message(e))}")
            sys.exit(2)
        except (VLReaderError, OSError, ValueError) as e:
            console.print(f"[red]Error:[/red] {escape(str(e))}")
            sys.exit(1)

    return wrapper


def run_config_options(func: Callable[..., Any]) -> Callable[..., Any]:
    """One --flag per RunConfig field; unset flags leave the lower layers in charge."""
    for name, field in reversed(list(RunConfig.model_fields.items())):
        flag = "--" + name.replace("_", "-")
        help_text = f"{field.description} [default: {field.default}]"
        if field.annotation is bool:
            option = click.option(f"{flag}/--no-{name.replace('_', '-')}", name, default=None, help=help_text)
        else:
            option = click.option(flag, name, type=field.annotation, default=None, help=help_text)
        func = option(func)
    return func


def _run_config(config_file: Optional[str], overrides: Dict[str, Any]) -> RunConfig:
    """Layered run configuration with flags applied last."""
    config = load_run_config(config_file, overrides)
    logger.debug(f"Run configuration: {config.model_dump()}")
    return config


def _load_images(path: str) -> List:
    """All samples of a dataset directory."""
    images = list(load_dataset(path))
    logger.info(f"Loaded {len(images)} samples from {path}")
    return images


def _parse_ints(value: str, param: str) -> List[int]:
    """Comma-separated integers, a usage error otherwise."""
    try:
        return [int(part) for part in value.split(",") if part.strip()]
    except ValueError:
        raise click.BadParameter(f"expected comma-separated integers, got {value!r}", param_hint=param)


@click.group()
@click.option('--verbose', '-v', is_flag=True, help='Enable verbose output')
@click.pass_context
def cli(ctx: click.Context, verbose: bool) -> None:
    """VL-Reader - masked visual-linguistic reconstruction for text recognition."""
    log_level = logging.DEBUG if verbose else logging.INFO
    logging.basicConfig(
        level=log_level,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )
    ctx.ensure_object(dict)
    ctx.obj['verbose'] = verbose


@cli.command('gen-data')
@click.option('--out', '-o', type=click.Path(), required=True, help='Output dataset directory')
@click.option('--n', 'n', type=click.IntRange(min=1), default=1000, show_default=True,
              help='Number of samples')
@click.option('--charset', default=DEFAULT_CHARSET, show_default=True, help='Characters to draw labels from')
@click.option('--min-len', type=click.IntRange(min=1), default=1, show_default=True, help='Shortest label')
@click.option('--max-len', type=click.IntRange(min=1), default=8, show_default=True, help='Longest label')
@click.option('--mix', default='clean=0.7,occluded=0.1,blurred=0.1,noisy=0.1', show_default=True,
              help='Corruption tag fractions, summing to 1')
@click.option('--seed', type=click.IntRange(min=0), default=0, show_default=True, help='Random seed')
@click.option('--splits', default=None, help='Write split subdirectories, e.g. train=0.8,val=0.1,test=0.1')
@click.option('--workers', type=click.IntRange(min=1), default=1, show_default=True, help='Rendering threads')
@click.option('--height', type=click.IntRange(min=1), default=32, show_default=True, help='Image height')
@click.option('--width', type=click.IntRange(min=1), default=128, show_default=True, help='Image width')
@click.option('--channels', type=click.Choice(['1', '3']), default='1', show_default=True, help='Image channels')
@handle_errors
def gen_data(
    out: str,
    n: int,
    charset: str,
    min_len: int,
    max_len: int,
    mix: str,
    seed: int,
    splits: Optional[str],
    workers: int,
    height: int,
    width: int,
    channels: str,
) -> None:
    """Generate a synthetic labeled text-image dataset."""
    if min_len > max_len:
        raise click.BadParameter("--min-len must not exceed --max-len", param_hint='--min-len')
    try:
        corruption_mix = parse_corruption_mix(mix)
    except ValueError as e:
        raise click.BadParameter(str(e), param_hint='--mix')
    try:
        chars = Charset(chars=charset, max_label_len=max(max_len, 25))
        sizes = parse_splits(splits, n) if splits else None
    except ValueError as e:
        raise click.UsageError(str(e))

    options = dict(height=height, width=width, channels=int(channels), workers=workers)
    with Progress(SpinnerColumn(), TextColumn("[progress.description]{task.description}"), console=console) as progress:
        task = progress.add_task(f"Rendering {n} samples...", total=None)
        if sizes:
            paths = build_splits(out, sizes, chars, (min_len, max_len), corruption_mix, seed, **options)
        else:
            build_dataset(out, n, chars, (min_len, max_len), corruption_mix, seed, **options)
            paths = {"all": Path(out)}
        progress.update(task, completed=True)

    for split, path in paths.items():
        rprint(f"[green]✓[/green] {split}: {path}")


def _training_progress(progress: Progress) -> Callable[[Phase, int, int, LossReport], None]:
    """Step callback that drives one progress bar per phase."""
    tasks: Dict[Phase, Any] = {}

    def on_step(phase: Phase, step: int, total: int, report: LossReport) -> None:
        if phase not in tasks:
            tasks[phase] = progress.add_task(f"{phase.value}", total=total, completed=step)
        progress.update(
            tasks[phase], completed=step + 1,
            description=f"{phase.value} loss={report.total:.4f}",
        )

    return on_step


@cli.command()
@click.option('--data', type=click.Path(exists=True, file_okay=False), required=True, help='Training dataset')
@click.option('--config', 'config_file', type=click.Path(exists=True, dir_okay=False), help='JSON run configuration')
@click.option('--phase', type=click.Choice(list(PHASES)), default='both', show_default=True,
              help='Which training phases to run')
@click.option('--resume', type=click.Path(exists=True, dir_okay=False), help='Checkpoint to continue from')
@click.option('--out', '-o', type=click.Path(), default='runs/latest', show_default=True, help='Output directory')
@run_config_options
@handle_errors
def train(
    data: str,
    config_file: Optional[str],
    phase: str,
    resume: Optional[str],
    out: str,
    **overrides: Any,
) -> None:
    """Run MVLR pretraining and/or fine-tuning."""
    config = _run_config(config_file, overrides)
    phases = PHASES[phase]
    images = _load_images(data)

    with Progress(
        SpinnerColumn(), TextColumn("[progress.description]{task.description}"),
        BarColumn(), TimeElapsedColumn(), console=console,
    ) as progress:
        state = train_two_phase(
            images, config, out, phases, resume=resume,
            on_step=_training_progress(progress),
        )

    for done in phases:
        path = checkpoint_path(out, done)
        if path.exists():
            rprint(f"[green]✓[/green] {done.value} checkpoint: {path}")
    rprint(f"[green]✓[/green] Finished {state.phase.value} at step {state.step}/{state.total_steps}")


def _display_eval(result: EvalResult) -> None:
    """Per-tag accuracy table."""
    table = Table(title="Word accuracy")
    table.add_column("Tag", style="cyan")
    table.add_column("Samples", justify="right")
    table.add_column("Accuracy", justify="right", style="green")
    for _, row in result.by_tag.iterrows():
        table.add_row(str(row['tag']), str(int(row['samples'])), f"{row['accuracy']:.2%}")
    table.add_row("[bold]overall[/bold]", str(len(result.records)), f"[bold]{result.accuracy:.2%}[/bold]")
    console.print(table)


@cli.command('eval')
@click.option('--data', type=click.Path(exists=True, file_okay=False), required=True, help='Evaluation dataset')
@click.option('--ckpt', type=click.Path(), required=True, help='Trained checkpoint')
@click.option('--no-refine', is_flag=True, help='Skip cloze refinement')
@click.option('--refine-iters', type=click.IntRange(min=0), default=1, show_default=True,
              help='Refinement passes')
@click.option('--batch-size', type=click.IntRange(min=1), default=64, show_default=True, help='Decode batch size')
@click.option('--device', default='cpu', show_default=True, help='Torch device')
@click.option('--out', '-o', type=click.Path(), default='runs/eval', show_default=True, help='Report directory')
@handle_errors
def eval_cmd(
    data: str, ckpt: str, no_refine: bool, refine_iters: int, batch_size: int, device: str, out: str
) -> None:
    """Word accuracy per corruption tag and overall."""
    model = load_reader(ckpt, device)
    images = _load_images(data)
    with Progress(SpinnerColumn(), TextColumn("[progress.description]{task.description}"), console=console) as progress:
        task = progress.add_task(f"Decoding {len(images)} images...", total=None)
        result = evaluate(model, images, refine_iters=0 if no_refine else refine_iters, batch_size=batch_size)
        progress.update(task, completed=True)

    write_report(result, out)
    _display_eval(result)
    rprint(f"[green]✓[/green] Report written to {out}")


@cli.command()
@click.option('--data', type=click.Path(exists=True, file_okay=False), required=True, help='Dataset to preview')
@click.option('--ckpt', type=click.Path(), required=True, help='Phase-1 checkpoint')
@click.option('--n', 'n', type=click.IntRange(min=1), default=4, show_default=True, help='Images to preview')
@click.option('--r-v', 'r_v', type=click.FloatRange(0.0, 1.0), default=0.75, show_default=True,
              help='Visual masking ratio')
@click.option('--seed', type=click.IntRange(min=0), default=0, show_default=True, help='Mask seed')
@click.option('--device', default='cpu', show_default=True, help='Torch device')
@click.option('--out', '-o', type=click.Path(), default='runs/reconstruct', show_default=True,
              help='Preview directory')
@handle_errors
def reconstruct(data: str, ckpt: str, n: int, r_v: float, seed: int, device: str, out: str) -> None:
    """Write ground truth / masked / reconstruction panels and masked-region MSE."""
    model = load_reader(ckpt, device)
    config = model.config
    images = _load_images(data)[:n]

    model_mse, baseline_mse = [], []
    for index, img in enumerate(images):
        plan = sample_visual_mask(config.n_patches, r_v, np.random.default_rng([seed, index]))
        save_preview(reconstruct_preview(model, img, plan), Path(out) / f"preview_{index:03d}.png")
        model_mse.append(masked_region_mse(model, img, plan))
        baseline_mse.append(mean_pixel_baseline_mse(img, plan, config.patch_h, config.patch_w))

    table = Table(title="Masked-region MSE")
    table.add_column("Source", style="cyan")
    table.add_column("MSE", justify="right")
    table.add_row("model", f"{np.mean(model_mse):.5f}")
    table.add_row("mean-pixel baseline", f"{np.mean(baseline_mse):.5f}")
    console.print(table)
    rprint(f"[green]✓[/green] {len(images)} previews written to {out}")


def _parse_perm(value: str, length: int) -> Permutation:
    """Order named identity, reverse or seed:<k>."""
    if value == 'identity':
        return Permutation.identity(length)
    if value == 'reverse':
        return Permutation.reverse(length)
    if value.startswith('seed:'):
        try:
            rng = np.random.default_rng(int(value[len('seed:'):]))
        except ValueError:
            raise click.BadParameter(f"bad seed in {value!r}", param_hint='--perm')
        return Permutation(order=tuple(int(p) + 1 for p in rng.permutation(length)))
    raise click.BadParameter("expected identity, reverse or seed:<k>", param_hint='--perm')


@cli.command()
@click.option('--len', 'length', type=click.IntRange(min=1), required=True, help='Label length L')
@click.option('--perm', default='identity', show_default=True, help='identity, reverse or seed:<k>')
@click.option('--masked', default='', help='1-based masked character positions, e.g. "2,5"')
@click.option('--cloze', is_flag=True, help='Print the refinement (cloze) mask instead')
@handle_errors
def masks(length: int, perm: str, masked: str, cloze: bool) -> None:
    """Print a query-to-context attention mask as a 0/1 grid (rows: queries, columns: BOS then characters)."""
    if cloze:
        mask: AttentionMask = build_cloze_mask(length + 1, length + 1)
    else:
        positions = _parse_ints(masked, '--masked')
        stray = [p for p in positions if not 1 <= p <= length]
        if stray:
            raise click.BadParameter(f"positions {stray} outside 1..{length}", param_hint='--masked')
        mask = query_text_mask(_parse_perm(perm, length), positions)
    click.echo(mask.to_ascii())


@cli.command()
@click.option('--data', type=click.Path(exists=True, file_okay=False), required=True, help='Training dataset')
@click.option('--eval-data', type=click.Path(exists=True, file_okay=False), required=True,
              help='Held-out dataset')
@click.option('--param', type=click.Choice(SWEEP_PARAMETERS), default='r_v', show_default=True,
              help='Masking ratio to sweep')
@click.option('--values', default='0.25,0.75', show_default=True, help='Comma-separated ratio values')
@click.option('--seeds', type=click.IntRange(min=1), default=3, show_default=True, help='Seeds per value')
@click.option('--config', 'config_file', type=click.Path(exists=True, dir_okay=False), help='JSON run configuration')
@click.option('--out', '-o', type=click.Path(), default='runs/sweep', show_default=True, help='Output directory')
@run_config_options
@handle_errors
def sweep(
    data: str,
    eval_data: str,
    param: str,
    values: str,
    seeds: int,
    config_file: Optional[str],
    out: str,
    **overrides: Any,
) -> None:
    """Two-phase training across masking-ratio values and seeds."""
    try:
        ratios = [float(v) for v in values.split(",") if v.strip()]
    except ValueError:
        raise click.BadParameter(f"expected comma-separated numbers, got {values!r}", param_hint='--values')
    config = _run_config(config_file, overrides)
    train_images, test_images = _load_images(data), _load_images(eval_data)

    with Progress(SpinnerColumn(), TextColumn("[progress.description]{task.description}"), console=console) as progress:
        task = progress.add_task(f"Sweeping {param} over {ratios} x {seeds} seeds...", total=None)
        frame = run_ratio_sweep(train_images, test_images, config, param, ratios, seeds, out)
        progress.update(task, completed=True)

    summary = frame.groupby("value")["accuracy"].agg(["mean", "std"]).reset_index().fillna(0.0)
    table = Table(title=f"{param} sweep")
    table.add_column(param, style="cyan")
    table.add_column("Mean accuracy", justify="right", style="green")
    table.add_column("Std", justify="right")
    for _, row in summary.iterrows():
        table.add_row(f"{row['value']:g}", f"{row['mean']:.2%}", f"{row['std']:.4f}")
    console.print(table)

    visualizer = TrainingVisualizer()
    visualizer.export_visualizations({f"sweep_{param}": visualizer.create_sweep_chart(frame)}, Path(out))
    rprint(f"[green]✓[/green] Sweep results in {out}")


@cli.command()
@click.option('--data', type=click.Path(exists=True, file_okay=False), required=True, help='Training dataset')
@click.option('--eval-data', type=click.Path(exists=True, file_okay=False), required=True,
              help='Held-out dataset')
@click.option('--config', 'config_file', type=click.Path(exists=True, dir_okay=False), help='JSON run configuration')
@click.option('--out', '-o', type=click.Path(), default='runs/ablation', show_default=True, help='Output directory')
@run_config_options
@handle_errors
def ablation(data: str, eval_data: str, config_file: Optional[str], out: str, **overrides: Any) -> None:
    """Compare visual-only, direct fine-tune and MVLR + fine-tune training."""
    config = _run_config(config_file, overrides)
    train_images, test_images = _load_images(data), _load_images(eval_data)

    with Progress(SpinnerColumn(), TextColumn("[progress.description]{task.description}"), console=console) as progress:
        task = progress.add_task("Training ablation variants...", total=None)
        frame = run_pretraining_ablation(train_images, test_images, config, out)
        progress.update(task, completed=True)

    table = Table(title="Pretraining ablation")
    for column in frame.columns:
        table.add_column(str(column), justify="left" if column == "variant" else "right")
    for _, row in frame.iterrows():
        table.add_row(*(str(v) if k == "variant" else f"{v:.2%}" for k, v in row.items()))
    console.print(table)
    rprint(f"[green]✓[/green] Ablation results in {out}")


@cli.command('plot-log')
@click.argument('log', type=click.Path(exists=True, dir_okay=False))
@click.option('--eval', 'records', type=click.Path(exists=True, dir_okay=False), help='records.jsonl of an eval run')
@click.option('--format', '-f', 'formats', multiple=True, type=click.Choice(['html', 'png', 'svg', 'pdf', 'json']),
              help='Export formats (default html)')
@click.option('--out', '-o', type=click.Path(), default='runs/plots', show_default=True, help='Output directory')
@handle_errors
def plot_log(log: str, records: Optional[str], formats: tuple, out: str) -> None:
    """Plot loss and learning-rate curves, and per-tag accuracy when given eval records."""
    visualizer = TrainingVisualizer(VisualizationConfig())
    figures = {"training": visualizer.create_loss_curves(read_training_log(log))}
    if records:
        figures["accuracy_by_tag"] = visualizer.create_tag_accuracy_chart(read_records(records))

    exported = visualizer.export_visualizations(figures, Path(out), list(formats) or None)
    for name, files in exported.items():
        for path in files:
            rprint(f"[green]✓[/green] {name}: {path}")


@cli.command()
def info() -> None:
    """Show version and default configuration."""
    info_text = f"""
[bold blue]VL-Reader[/bold blue] v{__version__}

Scene-text recognition with masked visual-linguistic reconstruction
pretraining, a permuted masked decoder and cloze refinement.

[bold]Commands:[/bold]
• gen-data     synthetic labeled text images
• train        MVLR pretraining and fine-tuning
• eval         word accuracy report
• reconstruct  masked-image reconstruction previews
• masks        attention-mask inspection
• sweep        masking-ratio sweeps
• ablation     pretraining ablation
• plot-log     training and evaluation charts
"""
    console.print(Panel(info_text, title="About", border_style="blue"))

    table = Table(title="Default configuration")
    table.add_column("Field", style="cyan")
    table.add_column("Default", style="green")
    table.add_column("Description")
    for name, field in RunConfig.model_fields.items():
        table.add_row(name, str(field.default), field.description or "")
    console.print(table)


def main() -> None:
    """Main entry point for the CLI."""
    cli()


if __name__ == '__main__':
    main()
