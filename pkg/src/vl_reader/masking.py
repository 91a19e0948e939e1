"""Stochastic masking and query-text attention-mask algebra.

Indexing convention for every ``AttentionMask``: column 0 is BOS and column j
is the j-th character of the context; row r is the query that predicts output
position r + 1, so for a label of length L row L is the EOS slot.
"""

import itertools
import math
from typing import Iterable, List, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator, model_validator

from .errors import ShapeMismatch
from .textcodec import TokenSeq


def exact_count(ratio: float, n: int) -> int:
    """round(ratio * n), rounding halves up."""
    return int(math.floor(ratio * n + 0.5))


class VisualMaskPlan(BaseModel):
    """Partition of patch indices into masked and visible sets."""

    model_config = ConfigDict(frozen=True)

    n_patches: int
    masked: Tuple[int, ...]
    visible: Tuple[int, ...]

    @model_validator(mode="after")
    def validate_partition(self) -> "VisualMaskPlan":
        if sorted(self.masked + self.visible) != list(range(self.n_patches)):
            raise ValueError("masked and visible must partition the patch indices")
        return self

    @classmethod
    def from_masked(cls, n_patches: int, masked: Iterable[int]) -> "VisualMaskPlan":
        chosen = sorted(set(int(i) for i in masked))
        visible = [i for i in range(n_patches) if i not in set(chosen)]
        return cls(n_patches=n_patches, masked=tuple(chosen), visible=tuple(visible))

    @classmethod
    def unmasked(cls, n_patches: int) -> "VisualMaskPlan":
        return cls.from_masked(n_patches, ())

    def as_bool(self) -> np.ndarray:
        """Boolean vector, True at masked patches."""
        flags = np.zeros(self.n_patches, dtype=bool)
        flags[list(self.masked)] = True
        return flags


class Permutation(BaseModel):
    """Factorization order over character positions 1..L; BOS is implicitly first."""

    model_config = ConfigDict(frozen=True)

    order: Tuple[int, ...]

    @field_validator("order")
    @classmethod
    def validate_order(cls, v: Tuple[int, ...]) -> Tuple[int, ...]:
        if sorted(v) != list(range(1, len(v) + 1)):
            raise ValueError(f"{v} is not a permutation of 1..{len(v)}")
        return v

    def __len__(self) -> int:
        return len(self.order)

    @classmethod
    def identity(cls, length: int) -> "Permutation":
        return cls(order=tuple(range(1, length + 1)))

    @classmethod
    def reverse(cls, length: int) -> "Permutation":
        return cls(order=tuple(range(length, 0, -1)))

    def restrict(self, length: int) -> "Permutation":
        """Same relative order over positions 1..length."""
        return Permutation(order=tuple(p for p in self.order if p <= length))

    def ranks(self) -> np.ndarray:
        """rank[p] = place of position p in the order (index 0 unused)."""
        rank = np.zeros(len(self.order) + 1, dtype=np.int64)
        for place, position in enumerate(self.order):
            rank[position] = place
        return rank


class AttentionMask(BaseModel):
    """Boolean query x context matrix; True means attention is permitted."""

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    allow: np.ndarray

    @field_validator("allow")
    @classmethod
    def validate_allow(cls, v: np.ndarray) -> np.ndarray:
        if v.ndim != 2:
            raise ValueError("attention mask must be two-dimensional")
        return v.astype(bool)

    @property
    def shape(self) -> Tuple[int, int]:
        return self.allow.shape  # type: ignore[return-value]

    def to_ascii(self) -> str:
        return "\n".join("".join("1" if cell else "0" for cell in row) for row in self.allow)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, AttentionMask):
            return NotImplemented
        return self.shape == other.shape and bool(np.array_equal(self.allow, other.allow))


def sample_visual_mask(n_patches: int, r_v: float, rng: np.random.Generator) -> VisualMaskPlan:
    """Mask exactly round(r_v * n) patches, uniformly without replacement."""
    if n_patches < 1:
        raise ValueError("n_patches must be at least 1")
    count = exact_count(r_v, n_patches)
    masked = rng.choice(n_patches, size=count, replace=False) if count else []
    return VisualMaskPlan.from_masked(n_patches, masked)


def sample_linguistic_mask(seq: TokenSeq, r_l: float, rng: np.random.Generator) -> TokenSeq:
    """Flag max(1, round(r_l * L)) character positions; none when r_l = 0."""
    if any(seq.masked):
        raise ValueError("sequence is already masked")
    length = len(seq)
    if r_l <= 0 or length == 0:
        return seq
    count = min(length, max(1, exact_count(r_l, length)))
    positions = rng.choice(length, size=count, replace=False)
    return seq.with_mask(int(p) for p in positions)


def build_permuted_mask(perm: Permutation, context_len: int) -> AttentionMask:
    """Query-to-context mask of a factorization order (L + 1 rows incl. EOS slot)."""
    length = len(perm)
    if context_len != length + 1:
        raise ShapeMismatch((length + 1,), (context_len,), what="context length")
    rank = perm.ranks()
    allow = np.zeros((length + 1, context_len), dtype=bool)
    allow[:, 0] = True
    for row in range(length):
        position = row + 1
        for column in range(1, context_len):
            allow[row, column] = rank[column] < rank[position]
    allow[length, :] = True
    return AttentionMask(allow=allow)


def build_masked_char_mask(
    masked_positions: Iterable[int], query_len: int, context_len: int
) -> AttentionMask:
    """Blank the columns of linguistically masked characters for every query."""
    allow = np.ones((query_len, context_len), dtype=bool)
    for column in masked_positions:
        if not 1 <= column < context_len:
            raise ValueError(f"masked position {column} is not a character column")
        allow[:, column] = False
    return AttentionMask(allow=allow)


def merge_and(a: AttentionMask, b: AttentionMask) -> AttentionMask:
    """Elementwise AND of two same-shaped masks."""
    if a.shape != b.shape:
        raise ShapeMismatch(a.shape, b.shape, what="attention mask")
    return AttentionMask(allow=a.allow & b.allow)


def build_cloze_mask(query_len: int, context_len: int) -> AttentionMask:
    """Every query sees all context except its own character column.

    The last row is the EOS slot; it has no character column of its own and
    allows the whole context, so character rows hold L_c - 1 entries and the
    EOS row holds L_c.
    """
    if context_len != query_len:
        raise ShapeMismatch((query_len,), (context_len,), what="context length")
    allow = np.ones((query_len, context_len), dtype=bool)
    for row in range(query_len):
        if row + 1 < context_len:
            allow[row, row + 1] = False
    return AttentionMask(allow=allow)


def build_causal_mask(query_len: int, context_len: int) -> AttentionMask:
    """Left-to-right mask; equals build_permuted_mask of the identity when square."""
    rows = np.arange(query_len)[:, None]
    columns = np.arange(context_len)[None, :]
    return AttentionMask(allow=columns <= rows)


def build_bos_only_mask(query_len: int, context_len: int) -> AttentionMask:
    """No linguistic context at all."""
    allow = np.zeros((query_len, context_len), dtype=bool)
    allow[:, 0] = True
    return AttentionMask(allow=allow)


def sample_permutations(length: int, k: int, rng: np.random.Generator) -> List[Permutation]:
    """Identity first, reverse second, then distinct uniform draws."""
    if k < 1:
        raise ValueError("k must be at least 1")
    total = math.factorial(length)
    wanted = min(k, total)
    perms = [Permutation.identity(length)]
    if wanted >= 2:
        perms.append(Permutation.reverse(length))
    seen = {p.order for p in perms}

    if length <= 6:
        pool = [p for p in itertools.permutations(range(1, length + 1)) if p not in seen]
        picks = rng.choice(len(pool), size=wanted - len(perms), replace=False) if pool else []
        perms.extend(Permutation(order=pool[int(i)]) for i in picks)
        return perms

    while len(perms) < wanted:
        order = tuple(int(p) + 1 for p in rng.permutation(length))
        if order not in seen:
            seen.add(order)
            perms.append(Permutation(order=order))
    return perms


def query_text_mask(
    perm: Permutation,
    masked_positions: Sequence[int] = (),
    linguistic_context: bool = True,
) -> AttentionMask:
    """m_{q,l}: permuted mask AND masked-character mask for one label."""
    context_len = len(perm) + 1
    permuted = build_permuted_mask(perm, context_len)
    if not linguistic_context:
        return merge_and(permuted, build_bos_only_mask(context_len, context_len))
    blanked = build_masked_char_mask(masked_positions, context_len, context_len)
    return merge_and(permuted, blanked)


def stack_masks(masks: Sequence[AttentionMask], query_len: int, context_len: int) -> np.ndarray:
    """Pad per-sample masks into a (B, query_len, context_len) batch.

    Padding rows attend BOS only; padding columns are never attended.
    """
    batch = np.zeros((len(masks), query_len, context_len), dtype=bool)
    batch[:, :, 0] = True
    for i, mask in enumerate(masks):
        rows, cols = mask.shape
        if rows > query_len or cols > context_len:
            raise ShapeMismatch((query_len, context_len), mask.shape, what="attention mask")
        batch[i, :rows, :cols] = mask.allow
    return batch
