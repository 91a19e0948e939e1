"""Synthetic labeled text images: rendering, corruption, patches and datasets on disk."""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, FrozenSet, Iterator, List, Mapping, NamedTuple, Optional, Tuple, Union

import numpy as np
from einops import rearrange
from PIL import Image
from pydantic import BaseModel, ConfigDict, field_validator

from .errors import DatasetIOError, IndivisibleGeometry, LabelTooWide, ManifestCorrupt
from .glyphs import GLYPH_HEIGHT, GLYPH_WIDTH, scaled_glyph
from .models import CORRUPTION_TAG_FOR_KIND, CorruptionKind, CorruptionTag
from .textcodec import Charset, encode

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.tsv"
IMAGE_DIR = "img"

# (horizontal scale, inter-glyph gap) in order of preference
_LAYOUTS = ((3, 2), (2, 1), (1, 1), (1, 0))
_VERTICAL_SCALES = (3, 2, 1)
_JITTER = 2
_MIN_CONTRAST = 0.5


class GlyphPlacement(NamedTuple):
    """Where one character was drawn."""
    char: str
    x: int
    y: int
    scale_x: int
    scale_y: int


class TextImage(BaseModel):
    """A normalized text image with its label and corruption tags."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    pixels: np.ndarray
    label: str
    corruption_tags: FrozenSet[CorruptionTag] = frozenset({CorruptionTag.CLEAN})
    placements: Tuple[GlyphPlacement, ...] = ()
    foreground: Optional[float] = None
    background: Optional[float] = None
    name: Optional[str] = None

    @field_validator("pixels")
    @classmethod
    def validate_pixels(cls, v: np.ndarray) -> np.ndarray:
        """Pixels are an HxWxC array inside [-1, 1]."""
        if v.ndim != 3:
            raise ValueError(f"pixels must be HxWxC, got shape {v.shape}")
        if v.size and (v.min() < -1.0 or v.max() > 1.0):
            raise ValueError("pixels must lie in [-1, 1]")
        return v

    @property
    def shape(self) -> Tuple[int, int, int]:
        return self.pixels.shape  # type: ignore[return-value]

    def text_region(self) -> Tuple[int, int, int, int]:
        """Bounding box (y0, x0, y1, x1) of the drawn glyphs, whole image if unknown."""
        height, width, _ = self.pixels.shape
        if not self.placements:
            return 0, 0, height, width
        y0 = min(p.y for p in self.placements)
        x0 = min(p.x for p in self.placements)
        y1 = max(p.y + GLYPH_HEIGHT * p.scale_y for p in self.placements)
        x1 = max(p.x + GLYPH_WIDTH * p.scale_x for p in self.placements)
        return y0, x0, y1, x1

    def with_pixels(self, pixels: np.ndarray, tag: CorruptionTag) -> "TextImage":
        tags = (set(self.corruption_tags) - {CorruptionTag.CLEAN}) | {tag}
        return self.model_copy(update={"pixels": pixels, "corruption_tags": frozenset(tags)})


class PatchGrid(BaseModel):
    """Row-major patches of an image."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    patches: np.ndarray
    grid_shape: Tuple[int, int]
    patch_shape: Tuple[int, int]
    channels: int

    @property
    def n_patches(self) -> int:
        return self.patches.shape[0]


def render(
    label: str,
    rng: np.random.Generator,
    *,
    height: int = 32,
    width: int = 128,
    channels: int = 1,
    charset: Optional[Charset] = None,
) -> TextImage:
    """Draw a label with the built-in font at a random position and contrast."""
    if charset is not None:
        encode(label, charset)
    label = label.lower()
    if not label:
        raise ValueError("label must contain at least one character")

    n = len(label)
    layout = next(
        ((sx, gap) for sx, gap in _LAYOUTS if n * GLYPH_WIDTH * sx + (n - 1) * gap <= width),
        None,
    )
    scale_y = next((s for s in _VERTICAL_SCALES if GLYPH_HEIGHT * s + 2 * _JITTER <= height), None)
    if layout is None or scale_y is None:
        raise LabelTooWide(label, width)
    scale_x, gap = layout

    glyph_h = GLYPH_HEIGHT * scale_y
    glyph_w = GLYPH_WIDTH * scale_x
    total_w = n * glyph_w + (n - 1) * gap
    x0 = int(rng.integers(0, width - total_w + 1))
    top = int(rng.integers(_JITTER, height - glyph_h - _JITTER + 1))

    while True:
        background = float(rng.uniform(-1.0, 1.0))
        foreground = float(rng.uniform(-1.0, 1.0))
        if abs(foreground - background) >= _MIN_CONTRAST:
            break

    canvas = np.full((height, width), background, dtype=np.float32)
    placements = []
    for i, char in enumerate(label):
        x = x0 + i * (glyph_w + gap)
        y = int(np.clip(top + rng.integers(-_JITTER, _JITTER + 1), 0, height - glyph_h))
        bitmap = scaled_glyph(char, scale_x, scale_y)
        region = canvas[y:y + glyph_h, x:x + glyph_w]
        region[bitmap] = foreground
        placements.append(GlyphPlacement(char, x, y, scale_x, scale_y))

    pixels = np.repeat(canvas[:, :, None], channels, axis=2)
    return TextImage(
        pixels=pixels,
        label=label,
        placements=tuple(placements),
        foreground=foreground,
        background=background,
    )


def corrupt(
    img: TextImage,
    kind: CorruptionKind,
    severity: float,
    rng: np.random.Generator,
) -> TextImage:
    """Apply one corruption; severity 0 only updates the tags."""
    severity = float(np.clip(severity, 0.0, 1.0))
    tag = CORRUPTION_TAG_FOR_KIND[kind]
    pixels = img.pixels.copy()
    if severity == 0.0:
        return img.with_pixels(pixels, tag)

    if kind == CorruptionKind.OCCLUDE:
        background = img.background if img.background is not None else float(np.median(pixels))
        pixels = _occlude(pixels, img.text_region(), severity, background, rng)
    elif kind == CorruptionKind.BLUR:
        pixels = _blur(pixels, sigma=1.5 * severity)
    elif kind == CorruptionKind.NOISE:
        pixels = pixels + rng.normal(0.0, 0.5 * severity, size=pixels.shape)
    else:
        raise ValueError(f"Unsupported corruption: {kind}")

    return img.with_pixels(np.clip(pixels, -1.0, 1.0).astype(np.float32), tag)


def _occlude(
    pixels: np.ndarray,
    region: Tuple[int, int, int, int],
    severity: float,
    background: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Paint one constant rectangle over 10% to severity x 60% of the text region."""
    y0, x0, y1, x1 = region
    region_h, region_w = y1 - y0, x1 - x0
    high = 0.6 * severity
    fraction = rng.uniform(min(0.1, high), high)
    area = fraction * region_h * region_w

    box_h = int(rng.integers(max(1, math.ceil(area / region_w)), region_h + 1))
    box_w = min(region_w, int(area // box_h))
    if box_w == 0:
        return pixels
    top = int(rng.integers(y0, y1 - box_h + 1))
    left = int(rng.integers(x0, x1 - box_w + 1))
    fill = float(rng.uniform(-1.0, 1.0))
    while abs(fill - background) < _MIN_CONTRAST:
        fill = float(rng.uniform(-1.0, 1.0))
    pixels[top:top + box_h, left:left + box_w, :] = fill
    return pixels


def _blur(pixels: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with edge padding."""
    radius = min(3, max(1, math.ceil(2 * sigma)))
    offsets = np.arange(-radius, radius + 1)
    kernel = np.exp(-(offsets ** 2) / (2 * sigma ** 2))
    kernel /= kernel.sum()

    out = pixels.astype(np.float64)
    for axis in (0, 1):
        pad = [(0, 0)] * out.ndim
        pad[axis] = (radius, radius)
        padded = np.pad(out, pad, mode="edge")
        length = out.shape[axis]
        out = sum(
            weight * np.take(padded, np.arange(k, k + length), axis=axis)
            for k, weight in enumerate(kernel)
        )
    return out


def patchify(img: Union[TextImage, np.ndarray], p_h: int, p_w: int) -> PatchGrid:
    """Cut an HxWxC image into row-major patches of p_h x p_w."""
    pixels = img.pixels if isinstance(img, TextImage) else np.asarray(img)
    height, width, channels = pixels.shape
    if height % p_h or width % p_w:
        raise IndivisibleGeometry((height, width), (p_h, p_w))
    patches = rearrange(pixels, "(r ph) (c pw) ch -> (r c) (ph pw ch)", ph=p_h, pw=p_w)
    return PatchGrid(
        patches=patches,
        grid_shape=(height // p_h, width // p_w),
        patch_shape=(p_h, p_w),
        channels=channels,
    )


def unpatchify(grid: PatchGrid) -> np.ndarray:
    """Inverse of patchify."""
    rows, cols = grid.grid_shape
    p_h, p_w = grid.patch_shape
    return rearrange(
        grid.patches,
        "(r c) (ph pw ch) -> (r ph) (c pw) ch",
        r=rows, c=cols, ph=p_h, pw=p_w, ch=grid.channels,
    )


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    """Denormalize [-1, 1] to 8-bit."""
    return np.clip(np.rint((pixels.astype(np.float64) + 1.0) * 127.5), 0, 255).astype(np.uint8)


def from_uint8(values: np.ndarray) -> np.ndarray:
    """Normalize 8-bit values to [-1, 1]."""
    return (values.astype(np.float32) / 127.5 - 1.0).clip(-1.0, 1.0)


def save_image(pixels: np.ndarray, path: Path) -> None:
    """Write a normalized image as binary PGM (grayscale) or PPM (RGB)."""
    data = to_uint8(pixels)
    if data.shape[2] == 1:
        data = data[:, :, 0]
    try:
        Image.fromarray(data).save(path, format="PPM")
    except OSError as e:
        raise DatasetIOError(f"Failed to write image {path}: {e}") from e


def load_image(path: Path) -> np.ndarray:
    """Read a PGM/PPM file back into a normalized HxWxC array."""
    try:
        with Image.open(path) as handle:
            data = np.asarray(handle)
    except OSError as e:
        raise DatasetIOError(f"Failed to read image {path}: {e}") from e
    if data.ndim == 2:
        data = data[:, :, None]
    return from_uint8(data)


def parse_corruption_mix(text: str) -> Dict[CorruptionTag, float]:
    """Parse 'clean=0.7,occluded=0.3' into tag fractions summing to 1."""
    mix: Dict[CorruptionTag, float] = {}
    for item in filter(None, (part.strip() for part in text.split(","))):
        key, sep, value = item.partition("=")
        if not sep:
            raise ValueError(f"Expected tag=fraction, got {item!r}")
        try:
            tag = CorruptionTag(key.strip())
            fraction = float(value)
        except ValueError as e:
            raise ValueError(f"Invalid corruption mix entry {item!r}") from e
        if fraction < 0:
            raise ValueError(f"Negative fraction for {key}")
        mix[tag] = fraction
    if not mix or abs(sum(mix.values()) - 1.0) > 1e-6:
        raise ValueError(f"Corruption fractions must sum to 1, got {sum(mix.values()):.6f}")
    return mix


def sample_rng(seed: int, index: int, stream: int = 0) -> np.random.Generator:
    """Per-sample generator; identical whether samples are made serially or in parallel."""
    return np.random.default_rng([seed, stream, index])


class ManifestEntry(NamedTuple):
    """One manifest line."""
    filename: str
    label: str
    tags: FrozenSet[CorruptionTag]


def _format_tags(tags: FrozenSet[CorruptionTag]) -> str:
    """Tags in declaration order, comma separated."""
    order = list(CorruptionTag)
    return ",".join(tag.value for tag in sorted(tags, key=order.index))


def _generate_sample(
    index: int,
    seed: int,
    stream: int,
    charset: Charset,
    len_range: Tuple[int, int],
    mix: Mapping[CorruptionTag, float],
    shape: Tuple[int, int, int],
    exclude: FrozenSet[str],
) -> Tuple[TextImage, bool]:
    rng = sample_rng(seed, index, stream)
    alphabet = list(charset.chars)
    disjoint = False
    for _ in range(100):
        length = int(rng.integers(len_range[0], len_range[1] + 1))
        label = "".join(rng.choice(alphabet, size=length))
        if label not in exclude:
            disjoint = True
            break

    height, width, channels = shape
    img = render(label, rng, height=height, width=width, channels=channels, charset=charset)

    tags = list(mix)
    tag = tags[int(rng.choice(len(tags), p=[mix[t] for t in tags]))]
    if tag != CorruptionTag.CLEAN:
        kind = next(k for k, t in CORRUPTION_TAG_FOR_KIND.items() if t == tag)
        img = corrupt(img, kind, float(rng.uniform(0.3, 1.0)), rng)
    return img, disjoint


def build_dataset(
    out_dir: Union[str, Path],
    n: int,
    charset: Charset,
    len_range: Tuple[int, int] = (1, 8),
    corruption_mix: Optional[Mapping[CorruptionTag, float]] = None,
    seed: int = 0,
    *,
    height: int = 32,
    width: int = 128,
    channels: int = 1,
    stream: int = 0,
    exclude_labels: FrozenSet[str] = frozenset(),
    workers: int = 1,
) -> List[ManifestEntry]:
    """Generate n samples and persist them with a manifest."""
    if n < 1:
        raise ValueError("n must be at least 1")
    lo, hi = len_range
    if not 1 <= lo <= hi <= charset.max_label_len:
        raise ValueError(f"Invalid label length range {len_range}")
    mix = dict(corruption_mix or {CorruptionTag.CLEAN: 1.0})

    out = Path(out_dir)
    try:
        (out / IMAGE_DIR).mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DatasetIOError(f"Cannot create dataset directory {out}: {e}") from e

    def make(index: int) -> Tuple[ManifestEntry, bool]:
        img, disjoint = _generate_sample(
            index, seed, stream, charset, (lo, hi), mix, (height, width, channels), exclude_labels
        )
        filename = f"{IMAGE_DIR}/{index:06d}.{'pgm' if channels == 1 else 'ppm'}"
        save_image(img.pixels, out / filename)
        return ManifestEntry(filename, img.label, img.corruption_tags), disjoint

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        results = list(pool.map(make, range(n)))

    entries = [entry for entry, _ in results]
    overlaps = sum(1 for _, disjoint in results if not disjoint)
    if overlaps:
        logger.warning(f"{overlaps} labels in {out} could not be kept disjoint from other splits")

    lines = [f"{e.filename}\t{e.label}\t{_format_tags(e.tags)}\n" for e in entries]
    try:
        with open(out / MANIFEST_NAME, "w", encoding="utf-8", newline="\n") as f:
            f.writelines(lines)
    except OSError as e:
        raise DatasetIOError(f"Failed to write manifest in {out}: {e}") from e

    logger.info(f"Wrote {n} samples to {out}")
    return entries


def build_splits(
    out_dir: Union[str, Path],
    sizes: Mapping[str, int],
    charset: Charset,
    len_range: Tuple[int, int] = (1, 8),
    corruption_mix: Optional[Mapping[CorruptionTag, float]] = None,
    seed: int = 0,
    **kwargs: int,
) -> Dict[str, Path]:
    """Build one dataset per split, keeping labels disjoint across splits where possible."""
    out = Path(out_dir)
    used: set = set()
    paths: Dict[str, Path] = {}
    for stream, (split, count) in enumerate(sizes.items(), start=1):
        if count < 1:
            continue
        entries = build_dataset(
            out / split, count, charset, len_range, corruption_mix, seed,
            stream=stream, exclude_labels=frozenset(used), **kwargs,
        )
        used.update(e.label for e in entries)
        paths[split] = out / split
    return paths


def read_manifest(path: Union[str, Path]) -> List[ManifestEntry]:
    """Parse manifest.tsv of a dataset directory."""
    manifest = Path(path) / MANIFEST_NAME
    try:
        with open(manifest, "r", encoding="utf-8", newline="\n") as f:
            raw_lines = f.read().split("\n")
    except OSError as e:
        raise DatasetIOError(f"Failed to read manifest {manifest}: {e}") from e

    entries = []
    for number, line in enumerate(raw_lines, start=1):
        if not line:
            continue
        parts = line.split("\t")
        if len(parts) != 3 or not parts[0]:
            raise ManifestCorrupt(number, line)
        filename, label, tag_field = parts
        try:
            tags = frozenset(CorruptionTag(t) for t in tag_field.split(",") if t)
        except ValueError:
            raise ManifestCorrupt(number, line, reason="tagged with an unknown corruption") from None
        entries.append(ManifestEntry(filename, label, tags or frozenset({CorruptionTag.CLEAN})))
    return entries


def load_dataset(path: Union[str, Path]) -> Iterator[TextImage]:
    """Stream the samples of a dataset directory in manifest order."""
    root = Path(path)
    for entry in read_manifest(root):
        yield TextImage(
            pixels=load_image(root / entry.filename),
            label=entry.label,
            corruption_tags=entry.tags,
            name=entry.filename,
        )


def dataset_size(path: Union[str, Path]) -> int:
    """Number of manifest entries."""
    return len(read_manifest(path))


def parse_splits(text: str, total: int) -> Dict[str, int]:
    """Turn 'train=0.8,val=0.1,test=0.1' into per-split sample counts."""
    fractions: Dict[str, float] = {}
    for item in filter(None, (part.strip() for part in text.split(","))):
        name, _, value = item.partition("=")
        fractions[name.strip()] = float(value)
    if not fractions or abs(sum(fractions.values()) - 1.0) > 1e-6:
        raise ValueError("Split fractions must sum to 1")
    counts = {name: int(total * frac) for name, frac in fractions.items()}
    first = next(iter(counts))
    counts[first] += total - sum(counts.values())
    return counts
