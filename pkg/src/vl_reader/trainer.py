"""Two-phase training: batching, masking, optimization, checkpoints and the step log."""

import logging
import math
import queue
import threading
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Iterable, Iterator, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
import torch

from .checkpoint import load_checkpoint, model_from_checkpoint, save_checkpoint
from .errors import DivergenceDetected, ShapeMismatch
from .masking import (
    Permutation,
    VisualMaskPlan,
    query_text_mask,
    sample_linguistic_mask,
    sample_permutations,
    sample_visual_mask,
)
from .models import LossReport, ModelConfig, Phase, PhaseConfig, RunConfig
from .network import ReaderInputs, VLReader, assemble_inputs
from .objective import linguistic_targets, mvlr_loss
from .synthdata import PatchGrid, TextImage, patchify
from .textcodec import Charset, TokenSeq, encode

logger = logging.getLogger(__name__)

WARMUP_FRACTION = 0.1
START_FACTOR = 1 / 25
FINAL_FACTOR = 1 / 1000
BETAS = (0.9, 0.999)

_PHASE_STREAMS = {Phase.MVLR: 0, Phase.FINETUNE: 1}
_LOG_FIELDS = ("step", "phase", "lr", "L_v", "L_l", "total", "wall_ms")


def lr_schedule(step: int, total_steps: int, lr_init: float) -> float:
    """One-cycle policy: linear warmup from lr/25 over 10% of steps, cosine down to lr/1000."""
    if total_steps <= 0:
        return lr_init
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    warmup = WARMUP_FRACTION * total_steps
    start = lr_init * START_FACTOR
    final = lr_init * FINAL_FACTOR
    if step <= warmup:
        return start + (lr_init - start) * step / warmup
    progress = (step - warmup) / (total_steps - warmup)
    return final + (lr_init - final) * 0.5 * (1.0 + math.cos(math.pi * progress))


class TrainingSample(NamedTuple):
    """A patchified image with its encoded label."""
    grid: PatchGrid
    seq: TokenSeq
    image: TextImage


def prepare_samples(images: Iterable[TextImage], config: ModelConfig) -> List[TrainingSample]:
    """Patchify and encode every image once."""
    charset = Charset(chars=config.charset, max_label_len=config.max_label_len)
    samples = []
    for img in images:
        if img.shape != (config.image_height, config.image_width, config.channels):
            raise ShapeMismatch(
                (config.image_height, config.image_width, config.channels), img.shape, what="image"
            )
        samples.append(
            TrainingSample(patchify(img, config.patch_h, config.patch_w), encode(img.label, charset), img)
        )
    return samples


def step_rng(seed: int, phase: Phase, step: int) -> np.random.Generator:
    """Masks and permutations of one step depend only on (seed, phase, step)."""
    return np.random.default_rng([seed, _PHASE_STREAMS[phase], step])


def step_seed(seed: int, phase: Phase, step: int) -> int:
    """Torch seed of one step (dropout)."""
    return int(step_rng(seed, phase, step).integers(2**31 - 1))


def epoch_order(seed: int, phase: Phase, epoch: int, n: int) -> np.ndarray:
    """Sample order of one epoch."""
    return np.random.default_rng([seed, _PHASE_STREAMS[phase], epoch, n]).permutation(n)


@dataclass
class PreparedBatch:
    """Forward inputs, one per permutation, plus the loss targets."""

    inputs: List[ReaderInputs]
    targets: torch.Tensor
    target_mask: torch.Tensor
    permutations: List[Permutation]


def phase_permutations(
    phase_cfg: PhaseConfig, length: int, rng: np.random.Generator
) -> List[Permutation]:
    """MVLR: one order per batch, identity half the time. Fine-tuning: K orders."""
    if phase_cfg.phase == Phase.MVLR:
        if length < 2 or rng.random() < 0.5:
            return [Permutation.identity(length)]
        return [Permutation(order=tuple(int(p) + 1 for p in rng.permutation(length)))]
    return sample_permutations(length, phase_cfg.permutations_per_batch, rng)


def prepare_batch(
    samples: Sequence[TrainingSample],
    phase_cfg: PhaseConfig,
    config: ModelConfig,
    rng: np.random.Generator,
) -> PreparedBatch:
    """Sample masks and permutations and assemble tensors for one batch."""
    charset = Charset(chars=config.charset, max_label_len=config.max_label_len)
    plans: List[VisualMaskPlan] = []
    seqs: List[TokenSeq] = []
    for sample in samples:
        if phase_cfg.r_v_eff > 0:
            plans.append(sample_visual_mask(sample.grid.n_patches, phase_cfg.r_v_eff, rng))
        else:
            plans.append(VisualMaskPlan.unmasked(sample.grid.n_patches))
        seqs.append(sample_linguistic_mask(sample.seq, phase_cfg.r_l_eff, rng))

    longest = max(len(seq) for seq in seqs)
    width = longest + 1
    perms = phase_permutations(phase_cfg, longest, rng)
    grids = [sample.grid for sample in samples]

    inputs = []
    for perm in perms:
        masks = [
            query_text_mask(perm.restrict(len(seq)), seq.masked_positions, config.linguistic_context)
            for seq in seqs
        ]
        inputs.append(assemble_inputs(grids, plans, seqs, masks, charset, width, width))
    targets, target_mask = linguistic_targets(seqs, width, phase_cfg.phase)
    return PreparedBatch(inputs=inputs, targets=targets, target_mask=target_mask, permutations=perms)


@dataclass
class TrainState:
    """Everything needed to continue a run exactly where it stopped."""

    model: VLReader
    optimizer: torch.optim.Optimizer
    phase: Phase
    step: int
    total_steps: int
    seed: int
    best_total: Optional[float] = None

    def tensors(self) -> Dict[str, torch.Tensor]:
        """Model parameters and optimizer moments keyed by parameter name."""
        tensors = {f"model.{k}": v for k, v in self.model.state_dict().items()}
        state = self.optimizer.state_dict()["state"]
        for index, (name, _) in enumerate(self.model.named_parameters()):
            for key, value in state.get(index, {}).items():
                tensors[f"optim.{name}.{key}"] = torch.as_tensor(value)
        return tensors


def new_optimizer(model: VLReader, lr: float, weight_decay: float) -> torch.optim.Optimizer:
    """AdamW over every model parameter."""
    return torch.optim.AdamW(model.parameters(), lr=lr, betas=BETAS, weight_decay=weight_decay)


def init_state(
    config: RunConfig,
    phase: Phase,
    n_samples: int,
    model: Optional[VLReader] = None,
) -> TrainState:
    """Fresh optimizer for a phase; a new model unless one is carried over."""
    phase_cfg = PhaseConfig.for_phase(phase, config)
    if model is None:
        torch.manual_seed(config.seed)
        model = VLReader(config.to_model_config()).to(config.device)
    steps_per_epoch = math.ceil(n_samples / config.batch_size)
    return TrainState(
        model=model,
        optimizer=new_optimizer(model, phase_cfg.lr_init, config.weight_decay),
        phase=phase,
        step=0,
        total_steps=steps_per_epoch * phase_cfg.epochs,
        seed=config.seed,
    )


def batch_indices(state: TrainState, step: int, n_samples: int, batch_size: int) -> np.ndarray:
    """Sample indices of a step within its epoch."""
    steps_per_epoch = math.ceil(n_samples / batch_size)
    epoch, offset = divmod(step, steps_per_epoch)
    order = epoch_order(state.seed, state.phase, epoch, n_samples)
    return order[offset * batch_size:(offset + 1) * batch_size]


class BatchPrefetcher:
    """Assembles upcoming batches on a worker thread through a bounded queue."""

    _DONE = object()

    def __init__(self, make_batch: Callable[[int], PreparedBatch], steps: Sequence[int], depth: int):
        self._make_batch = make_batch
        self._steps = list(steps)
        self._queue: "queue.Queue" = queue.Queue(maxsize=max(1, depth))
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._work, daemon=True)

    def _work(self) -> None:
        try:
            for step in self._steps:
                if self._stop.is_set():
                    return
                self._queue.put((step, self._make_batch(step)))
        except Exception as e:  # surfaced on the consumer side
            self._queue.put((None, e))
            return
        self._queue.put((None, self._DONE))

    def __iter__(self) -> Iterator[Tuple[int, PreparedBatch]]:
        self._thread.start()
        try:
            while True:
                step, item = self._queue.get()
                if item is self._DONE:
                    return
                if isinstance(item, Exception):
                    raise item
                yield step, item
        finally:
            self._stop.set()
            while not self._queue.empty():
                self._queue.get_nowait()


def format_log_record(record: Dict[str, object]) -> str:
    """One key=value step log line."""
    parts = []
    for key in _LOG_FIELDS:
        value = record[key]
        parts.append(f"{key}={value!r}" if isinstance(value, float) else f"{key}={value}")
    return " ".join(parts)


def read_training_log(path: Union[str, Path]) -> pd.DataFrame:
    """Parse a key=value step log into a DataFrame."""
    rows = []
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            rows.append(dict(item.split("=", 1) for item in line.split()))
    frame = pd.DataFrame(rows, columns=list(_LOG_FIELDS))
    for column in ("step", "wall_ms"):
        frame[column] = pd.to_numeric(frame[column]).astype(int)
    for column in ("lr", "L_v", "L_l", "total"):
        frame[column] = pd.to_numeric(frame[column])
    return frame


def train_step(
    state: TrainState, batch: PreparedBatch, phase_cfg: PhaseConfig, config: ModelConfig, lr: float
) -> LossReport:
    """One optimizer update, the loss averaged over the batch's permutations."""
    param = next(state.model.parameters())
    device = param.device
    for group in state.optimizer.param_groups:
        group["lr"] = lr

    state.model.train()
    state.optimizer.zero_grad(set_to_none=True)
    targets = batch.targets.to(device)
    target_mask = batch.target_mask.to(device)

    terms = []
    for inputs in batch.inputs:
        inputs = inputs.to(device, param.dtype)
        trace = state.model(inputs)
        terms.append(
            mvlr_loss(
                trace.pixels, trace.logits, inputs.patches, inputs.visual_mask, targets, target_mask,
                phase_cfg.lambda_v_eff, phase_cfg.lambda_l, config.norm_pix_loss,
            )
        )
    total = torch.stack([t.total for t in terms]).mean()
    if not torch.isfinite(total):
        raise DivergenceDetected(state.step, float(total))
    total.backward()
    state.optimizer.step()

    n = len(terms)
    return LossReport(
        l_v=sum(float(t.l_v) for t in terms) / n,
        l_l=sum(float(t.l_l) for t in terms) / n,
        total=float(total),
        per_layer_v=[sum(float(t.per_layer_v[i]) for t in terms) / n for i in range(config.dec_depth)],
        per_layer_l=[sum(float(t.per_layer_l[i]) for t in terms) / n for i in range(config.dec_depth)],
        masked_pixels=terms[0].masked_pixels,
        target_tokens=terms[0].target_tokens,
        visual_defined=terms[0].masked_pixels > 0,
    )


def run_phase(
    samples: Sequence[TrainingSample],
    phase_cfg: PhaseConfig,
    config: RunConfig,
    state: TrainState,
    log_path: Optional[Union[str, Path]] = None,
    max_steps: Optional[int] = None,
    on_step: Optional[Callable[[int, int, LossReport], None]] = None,
) -> TrainState:
    """Train until the phase's step budget (or ``max_steps`` more steps) is used up."""
    if not samples:
        raise ValueError("Training set is empty")
    if state.phase != phase_cfg.phase:
        raise ValueError(f"State belongs to phase {state.phase.value}, not {phase_cfg.phase.value}")
    model_config = config.to_model_config()

    last = state.total_steps if max_steps is None else min(state.total_steps, state.step + max_steps)
    steps = range(state.step, last)
    logger.info(
        f"Phase {phase_cfg.phase.value}: steps {state.step}..{last} of {state.total_steps}, "
        f"r_v={phase_cfg.r_v_eff} r_l={phase_cfg.r_l_eff} lambda_v={phase_cfg.lambda_v_eff}"
    )

    def make_batch(step: int) -> PreparedBatch:
        chosen = batch_indices(state, step, len(samples), config.batch_size)
        rng = step_rng(state.seed, state.phase, step)
        return prepare_batch([samples[i] for i in chosen], phase_cfg, model_config, rng)

    if config.prefetch > 0:
        batches: Iterable[Tuple[int, PreparedBatch]] = BatchPrefetcher(make_batch, steps, config.prefetch)
    else:
        batches = ((step, make_batch(step)) for step in steps)

    log_file = open(log_path, "a", encoding="utf-8") if log_path else None
    epoch_totals: List[float] = []
    steps_per_epoch = math.ceil(len(samples) / config.batch_size)
    try:
        for step, batch in batches:
            started = time.perf_counter()
            lr = lr_schedule(step, state.total_steps, phase_cfg.lr_init)
            torch.manual_seed(step_seed(state.seed, state.phase, step))
            report = train_step(state, batch, phase_cfg, model_config, lr)
            state.step = step + 1
            wall_ms = int((time.perf_counter() - started) * 1000)

            if log_file:
                log_file.write(format_log_record({
                    "step": step, "phase": phase_cfg.phase.value, "lr": lr, "L_v": report.l_v,
                    "L_l": report.l_l, "total": report.total, "wall_ms": wall_ms,
                }) + "\n")
                log_file.flush()
            logger.debug(f"step {step}: total={report.total:.5f} L_v={report.l_v:.5f} L_l={report.l_l:.5f}")

            epoch_totals.append(report.total)
            if state.step % steps_per_epoch == 0:
                mean_total = sum(epoch_totals) / len(epoch_totals)
                epoch_totals.clear()
                if state.best_total is None or mean_total < state.best_total:
                    state.best_total = mean_total
                logger.info(f"Epoch {state.step // steps_per_epoch} done, mean loss {mean_total:.5f}")
            if on_step:
                on_step(step, state.total_steps, report)
    finally:
        if log_file:
            log_file.close()

    logger.info(f"Phase {phase_cfg.phase.value} stopped at step {state.step}")
    return state


def checkpoint(state: TrainState, path: Union[str, Path]) -> Path:
    """Persist model, optimizer moments and schedule position."""
    metadata = {
        "kind": "train_state",
        "phase": state.phase.value,
        "step": state.step,
        "total_steps": state.total_steps,
        "seed": state.seed,
        "best_total": state.best_total,
        "lr": state.optimizer.param_groups[0]["lr"],
        "weight_decay": state.optimizer.param_groups[0]["weight_decay"],
    }
    return save_checkpoint(path, state.model.config, state.tensors(), metadata)


def restore(
    path: Union[str, Path],
    expected: Optional[ModelConfig] = None,
    device: str = "cpu",
) -> TrainState:
    """Inverse of checkpoint; ConfigMismatch when ``expected`` differs from the stored config."""
    ckpt = load_checkpoint(path, expected)
    model = model_from_checkpoint(ckpt, device)
    meta = ckpt.metadata
    optimizer = new_optimizer(model, meta.get("lr", 1e-3), meta.get("weight_decay", 0.0))

    optim_state: Dict[int, Dict[str, torch.Tensor]] = {}
    for index, (name, _) in enumerate(model.named_parameters()):
        prefix = f"optim.{name}."
        entry = {k[len(prefix):]: v.to(device) for k, v in ckpt.tensors.items() if k.startswith(prefix)}
        if entry:
            entry["step"] = entry["step"].cpu()
            optim_state[index] = entry
    optimizer.load_state_dict({"state": optim_state, "param_groups": optimizer.state_dict()["param_groups"]})

    logger.info(f"Restored {meta.get('phase', 'unknown')} state at step {meta.get('step', 0)} from {path}")
    return TrainState(
        model=model,
        optimizer=optimizer,
        phase=Phase(meta.get("phase", Phase.FINETUNE.value)),
        step=int(meta.get("step", 0)),
        total_steps=int(meta.get("total_steps", 0)),
        seed=int(meta.get("seed", 0)),
        best_total=meta.get("best_total"),
    )
