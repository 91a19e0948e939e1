"""Greedy decoding, cloze refinement, evaluation and reconstruction previews."""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Union

import numpy as np
import pandas as pd
import torch
from PIL import Image

from .checkpoint import load_checkpoint, model_from_checkpoint
from .errors import CheckpointError, CountMismatch, DatasetIOError, UntrainedParams
from .masking import (
    AttentionMask,
    Permutation,
    VisualMaskPlan,
    build_bos_only_mask,
    build_causal_mask,
    build_cloze_mask,
    query_text_mask,
    stack_masks,
)
from .models import Prediction
from .network import VLReader, assemble_inputs, context_tensor
from .objective import NORM_PIX_EPS
from .synthdata import PatchGrid, TextImage, patchify, to_uint8, unpatchify
from .textcodec import EOS_ID, Charset, TokenSeq, decode, encode

logger = logging.getLogger(__name__)

REPORT_NAME = "report.txt"
RECORDS_NAME = "records.jsonl"


def charset_of(model: VLReader) -> Charset:
    """Charset the model was built for."""
    return Charset(chars=model.config.charset, max_label_len=model.config.max_label_len)


def load_reader(path: Optional[Union[str, Path]], device: str = "cpu") -> VLReader:
    """Model parameters from a checkpoint, in eval mode."""
    if path is None or not Path(path).is_file():
        raise UntrainedParams(None if path is None else str(path))
    try:
        model = model_from_checkpoint(load_checkpoint(path), device)
    except CheckpointError as e:
        raise UntrainedParams(str(path)) from e
    return model.eval()


def _patches(model: VLReader, images: Sequence[TextImage]) -> torch.Tensor:
    """(B, N, D) patches on the model's device and dtype."""
    config = model.config
    device = next(model.parameters()).device
    dtype = next(model.parameters()).dtype
    grids = [patchify(img, config.patch_h, config.patch_w) for img in images]
    return torch.from_numpy(np.stack([g.patches for g in grids])).to(device=device, dtype=dtype)


def _class_probs(logits: torch.Tensor, num_classes: int) -> torch.Tensor:
    """Softmax over EOS and the character ids only."""
    return logits[..., :num_classes].softmax(dim=-1)


@torch.no_grad()
def greedy_decode_batch(model: VLReader, images: Sequence[TextImage]) -> List[Prediction]:
    """Left-to-right decoding; step t runs queries q_1..q_t over [BOS, y_1..y_{t-1}].

    The last step is the EOS slot of a full-length label and always emits EOS.
    """
    charset = charset_of(model)
    device = next(model.parameters()).device
    batch = len(images)
    query_len = model.config.query_len
    f_v = model.encode_image(_patches(model, images))

    context = torch.full((batch, 1), charset.bos_id, dtype=torch.long, device=device)
    done = torch.zeros(batch, dtype=torch.bool, device=device)
    tokens: List[List[int]] = [[] for _ in range(batch)]
    confidences: List[List[float]] = [[] for _ in range(batch)]

    for t in range(1, query_len + 1):
        step_mask = build_causal_mask(t, t) if model.config.linguistic_context else build_bos_only_mask(t, t)
        allow = torch.from_numpy(step_mask.allow).to(device)
        trace = model.decode(f_v, model.embed_text(context), allow.expand(batch, -1, -1))
        probs = _class_probs(trace.final_logits[:, t - 1], charset.num_classes)
        if t == query_len:
            conf = probs[:, EOS_ID]
            choice = torch.full_like(context[:, 0], EOS_ID)
        else:
            conf, choice = probs.max(dim=-1)
        for i in range(batch):
            if done[i]:
                continue
            tokens[i].append(int(choice[i]))
            confidences[i].append(float(conf[i]))
        done |= choice == EOS_ID
        if bool(done.all()):
            break
        context = torch.cat([context, choice[:, None]], dim=1)

    return [
        Prediction(text=decode(ids, charset), token_ids=ids, confidences=conf)
        for ids, conf in zip(tokens, confidences)
    ]


def greedy_decode(model: VLReader, img: TextImage) -> Prediction:
    """Greedy decoding of a single image."""
    return greedy_decode_batch(model, [img])[0]


def _draft_chars(prediction: Prediction, charset: Charset) -> List[int]:
    """Character ids of a draft up to its first EOS."""
    ids = []
    for token in prediction.token_ids:
        if token == EOS_ID:
            break
        ids.append(token)
    return ids[: charset.max_label_len]


@torch.no_grad()
def refine_batch(
    model: VLReader, images: Sequence[TextImage], drafts: Sequence[Prediction]
) -> List[Prediction]:
    """One full-sequence pass over the drafts under the cloze mask.

    Every sample is padded to the full query length, so a draft refines the
    same way whatever else shares its batch.
    """
    charset = charset_of(model)
    device = next(model.parameters()).device
    seqs = [TokenSeq(ids=ids, masked=[False] * len(ids)) for ids in (_draft_chars(d, charset) for d in drafts)]

    width = model.config.query_len
    build = build_cloze_mask if model.config.linguistic_context else build_bos_only_mask
    masks = [build(len(seq) + 1, len(seq) + 1) for seq in seqs]
    allow = torch.from_numpy(stack_masks(masks, width, width)).to(device)
    ids, _ = context_tensor(seqs, charset, width)

    trace = model.decode(
        model.encode_image(_patches(model, images)), model.embed_text(ids.to(device)), allow
    )
    probs = _class_probs(trace.final_logits, charset.num_classes)
    conf, choice = probs.max(dim=-1)

    refined = []
    for i, seq in enumerate(seqs):
        token_ids, token_conf = [], []
        for row in range(len(seq) + 1):
            if row == charset.max_label_len:
                token_ids.append(EOS_ID)
                token_conf.append(float(probs[i, row, EOS_ID]))
            else:
                token_ids.append(int(choice[i, row]))
                token_conf.append(float(conf[i, row]))
            if token_ids[-1] == EOS_ID:
                break
        refined.append(
            Prediction(text=decode(token_ids, charset), token_ids=token_ids, confidences=token_conf, refined=True)
        )
    return refined


def refine(model: VLReader, img: TextImage, draft: Prediction) -> Prediction:
    """Cloze refinement of a single draft."""
    return refine_batch(model, [img], [draft])[0]


def predict(
    model: VLReader,
    images: Sequence[TextImage],
    refine_iters: int = 1,
    batch_size: int = 64,
) -> List[Prediction]:
    """Greedy decode followed by ``refine_iters`` cloze passes."""
    model.eval()
    predictions: List[Prediction] = []
    for start in range(0, len(images), batch_size):
        chunk = images[start:start + batch_size]
        current = greedy_decode_batch(model, chunk)
        for _ in range(refine_iters):
            current = refine_batch(model, chunk, current)
        predictions.extend(current)
    return predictions


def word_accuracy(predictions: Sequence[Union[str, Prediction]], references: Sequence[str]) -> float:
    """Fraction of exact, case-insensitive matches."""
    if len(predictions) != len(references):
        raise CountMismatch(len(predictions), len(references))
    if not references:
        return 0.0
    texts = [p.text if isinstance(p, Prediction) else p for p in predictions]
    correct = sum(1 for p, r in zip(texts, references) if p.lower() == r.lower())
    return correct / len(references)


@dataclass
class EvalResult:
    records: pd.DataFrame
    by_tag: pd.DataFrame
    accuracy: float

    def to_text(self) -> str:
        lines = [f"{'tag':<12}{'samples':>9}{'accuracy':>10}"]
        for _, row in self.by_tag.iterrows():
            lines.append(f"{row['tag']:<12}{int(row['samples']):>9}{row['accuracy']:>10.4f}")
        lines.append(f"{'overall':<12}{len(self.records):>9}{self.accuracy:>10.4f}")
        return "\n".join(lines) + "\n"


def evaluate(
    model: VLReader,
    images: Iterable[TextImage],
    refine_iters: int = 1,
    batch_size: int = 64,
) -> EvalResult:
    """Word accuracy overall and per corruption tag."""
    images = list(images)
    predictions = predict(model, images, refine_iters=refine_iters, batch_size=batch_size)
    records = pd.DataFrame(
        [
            {
                "filename": img.name or f"sample_{i:06d}",
                "reference": img.label,
                "prediction": pred.text,
                "correct": pred.text.lower() == img.label.lower(),
                "mean_confidence": pred.mean_confidence,
                "tags": sorted(tag.value for tag in img.corruption_tags),
            }
            for i, (img, pred) in enumerate(zip(images, predictions))
        ],
        columns=["filename", "reference", "prediction", "correct", "mean_confidence", "tags"],
    )
    accuracy = word_accuracy(predictions, [img.label for img in images])

    exploded = records.explode("tags")
    by_tag = (
        exploded.groupby("tags")["correct"]
        .agg(samples="size", accuracy="mean")
        .reset_index()
        .rename(columns={"tags": "tag"})
    )
    logger.info(f"Evaluated {len(records)} samples: word accuracy {accuracy:.4f}")
    return EvalResult(records=records, by_tag=by_tag, accuracy=accuracy)


def write_report(result: EvalResult, out_dir: Union[str, Path]) -> Path:
    """report.txt table plus one JSON record per sample."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / REPORT_NAME).write_text(result.to_text(), encoding="utf-8")
    with open(out / RECORDS_NAME, "w", encoding="utf-8") as f:
        for record in result.records.to_dict(orient="records"):
            record["correct"] = bool(record["correct"])
            record["mean_confidence"] = float(record["mean_confidence"])
            f.write(json.dumps(record) + "\n")
    return out


def read_records(path: Union[str, Path]) -> pd.DataFrame:
    """Load per-sample evaluation records."""
    return pd.read_json(path, lines=True)


@torch.no_grad()
def reconstruct_patches(
    model: VLReader,
    img: TextImage,
    plan: VisualMaskPlan,
    seq: Optional[TokenSeq] = None,
) -> np.ndarray:
    """Final-layer patch predictions (N x D) in pixel space."""
    model.eval()
    config = model.config
    charset = charset_of(model)
    seq = seq if seq is not None else encode(img.label, charset)
    grid = patchify(img, config.patch_h, config.patch_w)
    mask: AttentionMask = query_text_mask(
        Permutation.identity(len(seq)), seq.masked_positions, config.linguistic_context
    )
    width = len(seq) + 1
    device = next(model.parameters()).device
    inputs = assemble_inputs(
        [grid], [plan], [seq], [mask], charset, width, width, dtype=next(model.parameters()).dtype
    ).to(device)
    pixels = model(inputs).final_pixels[0].double().cpu().numpy()

    if config.norm_pix_loss:
        target = grid.patches.astype(np.float64)
        mean = target.mean(axis=-1, keepdims=True)
        std = np.sqrt(target.var(axis=-1, keepdims=True) + NORM_PIX_EPS)
        pixels = pixels * std + mean
    return pixels


def reconstruct_preview(
    model: VLReader,
    img: TextImage,
    plan: VisualMaskPlan,
    seq: Optional[TokenSeq] = None,
) -> np.ndarray:
    """Ground truth, masked input and reconstruction stacked vertically, as uint8."""
    config = model.config
    grid = patchify(img, config.patch_h, config.patch_w)
    flags = plan.as_bool()

    masked = grid.patches.copy()
    masked[flags] = -1.0
    rebuilt = grid.patches.copy()
    if flags.any():
        rebuilt[flags] = np.clip(reconstruct_patches(model, img, plan, seq)[flags], -1.0, 1.0)

    panels = [
        img.pixels,
        unpatchify(grid.model_copy(update={"patches": masked})),
        unpatchify(grid.model_copy(update={"patches": rebuilt})),
    ]
    return to_uint8(np.concatenate(panels, axis=0))


def masked_region_mse(
    model: VLReader, img: TextImage, plan: VisualMaskPlan, seq: Optional[TokenSeq] = None
) -> float:
    """MSE of the reconstruction over masked patches, in normalized pixel units."""
    flags = plan.as_bool()
    if not flags.any():
        return 0.0
    grid: PatchGrid = patchify(img, model.config.patch_h, model.config.patch_w)
    predicted = reconstruct_patches(model, img, plan, seq)
    return float(np.mean((predicted[flags] - grid.patches[flags]) ** 2))


def mean_pixel_baseline_mse(img: TextImage, plan: VisualMaskPlan, p_h: int = 4, p_w: int = 8) -> float:
    """MSE of filling masked patches with the mean visible pixel."""
    flags = plan.as_bool()
    if not flags.any():
        return 0.0
    grid = patchify(img, p_h, p_w)
    visible = grid.patches[~flags]
    fill = float(visible.mean()) if visible.size else 0.0
    return float(np.mean((grid.patches[flags] - fill) ** 2))


def save_preview(preview: np.ndarray, path: Union[str, Path]) -> Path:
    """Write a uint8 preview panel as PNG."""
    path = Path(path)
    data = preview[:, :, 0] if preview.shape[2] == 1 else preview
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(data).save(path, format="PNG")
    except OSError as e:
        raise DatasetIOError(f"Failed to write preview {path}: {e}") from e
    return path
