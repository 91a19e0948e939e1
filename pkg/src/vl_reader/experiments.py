"""Two-phase training driver, the pretraining ablation and masking-ratio sweeps."""

import logging
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Union

import pandas as pd

from .config import save_run_config
from .errors import CheckpointError
from .inference import EvalResult, evaluate, write_report
from .models import LossReport, Phase, PhaseConfig, RunConfig
from .synthdata import TextImage
from .trainer import TrainState, checkpoint, init_state, prepare_samples, restore, run_phase

logger = logging.getLogger(__name__)

LOG_NAME = "train_log.txt"
CONFIG_NAME = "config.json"

ABLATION_VARIANTS = ("visual_only", "direct_finetune", "mvlr_finetune")
SWEEP_PARAMETERS = ("r_v", "r_l")

StepCallback = Callable[[Phase, int, int, LossReport], None]


def checkpoint_path(out_dir: Union[str, Path], phase: Phase) -> Path:
    """Checkpoint file of a phase inside a run directory."""
    return Path(out_dir) / f"{phase.value}.vlrd"


def train_two_phase(
    train: Sequence[TextImage],
    run_cfg: RunConfig,
    out_dir: Union[str, Path],
    phases: Sequence[Phase] = (Phase.MVLR, Phase.FINETUNE),
    resume: Optional[Union[str, Path]] = None,
    on_step: Optional[StepCallback] = None,
) -> TrainState:
    """Run the requested phases in order; each later phase starts from the previous model.

    With ``resume`` the checkpointed state continues its own phase, or seeds the
    model of the first requested phase when it belongs to an earlier one.
    """
    if not phases:
        raise ValueError("No training phase requested")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_run_config(run_cfg, out / CONFIG_NAME)
    samples = prepare_samples(train, run_cfg)
    model_config = run_cfg.to_model_config()

    carried: Optional[TrainState] = None
    if resume is not None:
        carried = restore(resume, expected=model_config, device=run_cfg.device)
        if carried.phase == Phase.FINETUNE:
            if Phase.FINETUNE not in phases:
                raise CheckpointError("Cannot resume a finetune checkpoint into the mvlr phase")
            phases = [Phase.FINETUNE]

    state: Optional[TrainState] = None
    for phase in phases:
        phase_cfg = PhaseConfig.for_phase(phase, run_cfg)
        if carried is not None and carried.phase == phase:
            state = carried
        else:
            previous = carried if carried is not None else state
            state = init_state(run_cfg, phase, len(samples), model=previous.model if previous else None)
        carried = None

        run_phase(
            samples, phase_cfg, run_cfg, state,
            log_path=out / LOG_NAME, on_step=_phase_callback(on_step, phase),
        )
        checkpoint(state, checkpoint_path(out, phase))

    assert state is not None
    return state


def _phase_callback(on_step: Optional[StepCallback], phase: Phase):
    """Bind the phase into a run_phase step callback."""
    if on_step is None:
        return None

    def callback(step: int, total: int, report: LossReport) -> None:
        on_step(phase, step, total, report)

    return callback


def _accuracy_row(variant: str, result: EvalResult) -> Dict[str, object]:
    """Overall and per-tag accuracy as one table row."""
    row: Dict[str, object] = {"variant": variant, "overall": result.accuracy}
    for _, tag_row in result.by_tag.iterrows():
        row[tag_row["tag"]] = tag_row["accuracy"]
    return row


def run_pretraining_ablation(
    train: Sequence[TextImage],
    test: Sequence[TextImage],
    run_cfg: RunConfig,
    out_dir: Union[str, Path],
) -> pd.DataFrame:
    """Word accuracy of the visual-only, direct fine-tune and MVLR + fine-tune variants."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    variants = {
        "visual_only": (run_cfg.model_copy(update={"linguistic_context": False}), (Phase.FINETUNE,)),
        "direct_finetune": (run_cfg, (Phase.FINETUNE,)),
        "mvlr_finetune": (run_cfg, (Phase.MVLR, Phase.FINETUNE)),
    }
    rows: List[Dict[str, object]] = []
    for variant in ABLATION_VARIANTS:
        cfg, phases = variants[variant]
        logger.info(f"Ablation variant {variant}: phases {[p.value for p in phases]}")
        state = train_two_phase(train, cfg, out / variant, phases)
        result = evaluate(state.model, test, refine_iters=cfg.refine_iters, batch_size=cfg.batch_size)
        write_report(result, out / variant)
        rows.append(_accuracy_row(variant, result))

    frame = pd.DataFrame(rows)
    frame.to_csv(out / "ablation.csv", index=False)
    return frame


def run_ratio_sweep(
    train: Sequence[TextImage],
    test: Sequence[TextImage],
    run_cfg: RunConfig,
    parameter: str,
    values: Sequence[float],
    seeds: Union[int, Sequence[int]],
    out_dir: Union[str, Path],
) -> pd.DataFrame:
    """Accuracy after two-phase training for each (value, seed); ``mean`` holds the per-value average."""
    if parameter not in SWEEP_PARAMETERS:
        raise ValueError(f"Unknown sweep parameter {parameter!r}, expected one of {SWEEP_PARAMETERS}")
    seed_list = list(range(seeds)) if isinstance(seeds, int) else list(seeds)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)

    rows = []
    for value in values:
        for seed in seed_list:
            cfg = RunConfig(**{**run_cfg.model_dump(), parameter: value, "seed": seed})
            state = train_two_phase(train, cfg, out / f"{parameter}_{value}" / f"seed_{seed}")
            result = evaluate(state.model, test, refine_iters=cfg.refine_iters, batch_size=cfg.batch_size)
            logger.info(f"{parameter}={value} seed={seed}: accuracy {result.accuracy:.4f}")
            rows.append({"parameter": parameter, "value": value, "seed": seed, "accuracy": result.accuracy})

    frame = pd.DataFrame(rows, columns=["parameter", "value", "seed", "accuracy"])
    frame["mean"] = frame.groupby("value")["accuracy"].transform("mean")
    frame.to_csv(out / f"sweep_{parameter}.csv", index=False)
    return frame
