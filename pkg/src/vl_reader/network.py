"""The VL-Reader network: visual encoder, text embedding, MVLD decoder and heads."""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
from einops import rearrange

from .errors import MaskShapeMismatch, ShapeMismatch
from .masking import AttentionMask, VisualMaskPlan, stack_masks
from .models import ModelConfig
from .synthdata import PatchGrid
from .textcodec import Charset, TokenSeq

logger = logging.getLogger(__name__)


class FeedForward(nn.Module):
    """Pre-norm two-layer GELU MLP."""

    def __init__(self, dim: int, hidden_dim: int, dropout: float = 0.0):
        super().__init__()
        self.norm = nn.LayerNorm(dim)
        self.fc1 = nn.Linear(dim, hidden_dim)
        self.gelu = nn.GELU()
        self.fc2 = nn.Linear(hidden_dim, dim)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.norm(x)
        x = self.dropout(self.gelu(self.fc1(x)))
        return self.dropout(self.fc2(x))


class MaskedAttention(nn.Module):
    """Multi-head attention with a boolean allow mask.

    Rows whose mask allows nothing fall back to the first context position,
    which is BOS for query-to-text attention.
    """

    def __init__(self, dim: int, heads: int, dropout: float = 0.0, cross: bool = True):
        super().__init__()
        self.heads = heads
        self.scale = (dim // heads) ** -0.5

        self.norm_q = nn.LayerNorm(dim)
        self.norm_kv = nn.LayerNorm(dim) if cross else None
        self.to_q = nn.Linear(dim, dim)
        self.to_kv = nn.Linear(dim, dim * 2)
        self.to_out = nn.Sequential(nn.Linear(dim, dim), nn.Dropout(dropout))
        self.dropout = nn.Dropout(dropout)

    def forward(
        self,
        x: torch.Tensor,
        context: Optional[torch.Tensor] = None,
        allow: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        queries = self.norm_q(x)
        if context is not None and self.norm_kv is None:
            raise ValueError("self-attention layer was given a context")
        keys = queries if context is None else self.norm_kv(context)

        q = rearrange(self.to_q(queries), "b n (h d) -> b h n d", h=self.heads)
        k, v = map(
            lambda t: rearrange(t, "b n (h d) -> b h n d", h=self.heads),
            self.to_kv(keys).chunk(2, dim=-1),
        )
        dots = torch.matmul(q, k.transpose(-1, -2)) * self.scale

        if allow is not None:
            expected = (x.shape[0], x.shape[1], keys.shape[1])
            if tuple(allow.shape) != expected:
                raise MaskShapeMismatch(expected, tuple(allow.shape))
            empty = ~allow.any(dim=-1, keepdim=True)
            first = torch.zeros_like(allow)
            first[..., 0] = True
            allow = allow | (empty & first)
            dots = dots.masked_fill(~allow[:, None, :, :], float("-inf"))

        attn = self.dropout(dots.softmax(dim=-1))
        out = rearrange(torch.matmul(attn, v), "b h n d -> b n (h d)")
        return self.to_out(out)


class AttentionBlock(nn.Module):
    """Pre-norm attention plus feed-forward, both residual."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float, dropout: float = 0.0, cross: bool = True):
        super().__init__()
        self.attn = MaskedAttention(dim, heads, dropout=dropout, cross=cross)
        self.ffn = FeedForward(dim, int(dim * mlp_ratio), dropout=dropout)

    def forward(
        self,
        x: torch.Tensor,
        context: Optional[torch.Tensor] = None,
        allow: Optional[torch.Tensor] = None,
    ) -> torch.Tensor:
        x = self.attn(x, context, allow) + x
        x = self.ffn(x) + x
        return x


class MVLDLayer(nn.Module):
    """One masked visual-linguistic decoder layer.

    The last query row is the visual-stream row: it sees BOS only and is the
    only query the visual update reads, so no character reaches F_v.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        d, h, r, p = config.d_model, config.n_heads, config.mlp_ratio, config.dropout
        self.visual_self = AttentionBlock(d, h, r, p, cross=False)
        self.query_text = AttentionBlock(d, h, r, p)
        self.visual_update = AttentionBlock(d, h, r, p)
        self.query_update = AttentionBlock(d, h, r, p)

    def forward(
        self,
        f_v: torch.Tensor,
        f_q: torch.Tensor,
        f_l: torch.Tensor,
        allow: torch.Tensor,
    ):
        if f_v.shape[-1] != f_q.shape[-1] or f_q.shape[-1] != f_l.shape[-1]:
            raise ShapeMismatch(f_v.shape, f_q.shape, what="decoder stream")
        h_v = self.visual_self(f_v)
        h_q = self.query_text(f_q, f_l, allow)
        f_v_next = self.visual_update(h_v, h_q[:, -1:])
        f_q_next = self.query_update(h_q, h_v)
        return f_v_next, f_q_next, h_v, h_q


def _head(dim: int, out_dim: int) -> nn.Module:
    """Two-layer reconstruction head."""
    return nn.Sequential(nn.LayerNorm(dim), nn.Linear(dim, dim), nn.GELU(), nn.Linear(dim, out_dim))


@dataclass
class LayerTrace:
    """States, reconstructions and logits of one decoder layer."""
    h_v: torch.Tensor
    h_q: torch.Tensor
    f_v: torch.Tensor
    f_q: torch.Tensor
    pixels: torch.Tensor
    logits: torch.Tensor


@dataclass
class DecoderTrace:
    """Encoder outputs and per-layer decoder states and reconstructions."""

    f_v: torch.Tensor
    f_l: torch.Tensor
    layers: List[LayerTrace] = field(default_factory=list)

    @property
    def pixels(self) -> torch.Tensor:
        """(N_d, B, N, D) patch reconstructions."""
        return torch.stack([layer.pixels for layer in self.layers])

    @property
    def logits(self) -> torch.Tensor:
        """(N_d, B, L_q, vocab) logits."""
        return torch.stack([layer.logits for layer in self.layers])

    @property
    def final_logits(self) -> torch.Tensor:
        return self.layers[-1].logits

    @property
    def final_pixels(self) -> torch.Tensor:
        return self.layers[-1].pixels


@dataclass
class ReaderInputs:
    """Batched tensors for one forward pass."""

    patches: torch.Tensor
    context_ids: torch.Tensor
    allow: torch.Tensor
    visual_mask: Optional[torch.Tensor] = None
    context_masked: Optional[torch.Tensor] = None

    def to(self, device: torch.device, dtype: Optional[torch.dtype] = None) -> "ReaderInputs":
        """Move to ``device``; ``dtype`` applies to the pixel patches only."""
        def move(t: Optional[torch.Tensor]) -> Optional[torch.Tensor]:
            return None if t is None else t.to(device)

        return ReaderInputs(
            patches=self.patches.to(device=device, dtype=dtype or self.patches.dtype),
            context_ids=self.context_ids.to(device),
            allow=self.allow.to(device),
            visual_mask=move(self.visual_mask),
            context_masked=move(self.context_masked),
        )


def context_tensor(
    seqs: Sequence[TokenSeq], charset: Charset, context_len: int
) -> Tuple[torch.Tensor, torch.Tensor]:
    """[BOS, ids..., PAD...] id rows and the matching MASK_L flags."""
    ids = np.full((len(seqs), context_len), charset.pad_id, dtype=np.int64)
    masked = np.zeros((len(seqs), context_len), dtype=bool)
    ids[:, 0] = charset.bos_id
    for i, seq in enumerate(seqs):
        if len(seq) + 1 > context_len:
            raise ShapeMismatch((context_len,), (len(seq) + 1,), what="context")
        ids[i, 1:len(seq) + 1] = seq.ids
        masked[i, 1:len(seq) + 1] = seq.masked
    return torch.from_numpy(ids), torch.from_numpy(masked)


def assemble_inputs(
    grids: Sequence[PatchGrid],
    plans: Sequence[VisualMaskPlan],
    seqs: Sequence[TokenSeq],
    masks: Sequence[AttentionMask],
    charset: Charset,
    query_len: int,
    context_len: int,
    dtype: torch.dtype = torch.float32,
) -> ReaderInputs:
    """Stack per-sample grids, plans, labels and masks into a ReaderInputs batch."""
    patches = torch.from_numpy(np.stack([g.patches for g in grids])).to(dtype)
    visual = torch.from_numpy(np.stack([p.as_bool() for p in plans]))
    ids, masked = context_tensor(seqs, charset, context_len)
    allow = torch.from_numpy(stack_masks(masks, query_len, context_len))
    return ReaderInputs(
        patches=patches,
        context_ids=ids,
        allow=allow,
        visual_mask=visual if visual.any() else None,
        context_masked=masked,
    )


class VLReader(nn.Module):
    """Visual encoder over visible patches, text embedding and an N_d-layer MVLD."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d = config.d_model

        self.patch_embed = nn.Linear(config.patch_dim, d)
        self.pos_embed_v = nn.Parameter(torch.zeros(1, config.n_patches, d))
        self.mask_token_v = nn.Parameter(torch.zeros(1, 1, d))
        self.encoder = nn.ModuleList(
            [AttentionBlock(d, config.n_heads, config.mlp_ratio, config.dropout, cross=False)
             for _ in range(config.enc_depth)]
        )
        self.encoder_norm = nn.LayerNorm(d)

        self.token_embed = nn.Embedding(config.vocab_size, d)
        self.pos_embed_l = nn.Parameter(torch.zeros(1, config.max_label_len + 1, d))
        self.query_tokens = nn.Parameter(torch.zeros(1, config.query_len, d))
        self.visual_query = nn.Parameter(torch.zeros(1, 1, d))

        self.decoder = nn.ModuleList([MVLDLayer(config) for _ in range(config.dec_depth)])
        n_heads = 1 if config.share_heads else config.dec_depth
        self.visual_heads = nn.ModuleList([_head(d, config.patch_dim) for _ in range(n_heads)])
        self.linguistic_heads = nn.ModuleList([_head(d, config.vocab_size) for _ in range(n_heads)])

        self.apply(self._init_weights)
        embeddings = (self.pos_embed_v, self.mask_token_v, self.pos_embed_l, self.query_tokens, self.visual_query)
        for p in embeddings:
            nn.init.trunc_normal_(p, std=0.02)

    @staticmethod
    def _init_weights(module: nn.Module) -> None:
        if isinstance(module, (nn.Linear, nn.Embedding)):
            nn.init.trunc_normal_(module.weight, std=0.02)
            if isinstance(module, nn.Linear) and module.bias is not None:
                nn.init.zeros_(module.bias)
        elif isinstance(module, nn.LayerNorm):
            nn.init.ones_(module.weight)
            nn.init.zeros_(module.bias)

    @property
    def mask_id(self) -> int:
        return self.config.vocab_size - 1

    def num_parameters(self) -> int:
        """Total number of parameter elements."""
        return sum(p.numel() for p in self.parameters())

    def encode_image(
        self, patches: torch.Tensor, visual_mask: Optional[torch.Tensor] = None
    ) -> torch.Tensor:
        """F_v: encode visible patches only, then infill masked rows with the mask token."""
        batch, n_patches, patch_dim = patches.shape
        if (n_patches, patch_dim) != (self.config.n_patches, self.config.patch_dim):
            raise ShapeMismatch(
                (self.config.n_patches, self.config.patch_dim), (n_patches, patch_dim), what="patches"
            )
        pos = self.pos_embed_v.expand(batch, -1, -1)
        if visual_mask is None or not bool(visual_mask.any()):
            x = self.patch_embed(patches) + pos
            for block in self.encoder:
                x = block(x)
            return self.encoder_norm(x)

        if tuple(visual_mask.shape) != (batch, n_patches):
            raise ShapeMismatch((batch, n_patches), tuple(visual_mask.shape), what="visual mask")
        counts = visual_mask.sum(dim=1)
        if bool((counts != counts[0]).any()):
            raise ShapeMismatch((int(counts[0]),), tuple(counts.tolist()), what="masked patch counts")
        n_visible = n_patches - int(counts[0])

        order = torch.argsort(visual_mask.to(torch.int8), dim=1, stable=True)
        keep = order[:, :n_visible]
        d = self.config.d_model

        visible = torch.gather(patches, 1, keep[..., None].expand(-1, -1, patch_dim))
        x = self.patch_embed(visible) + torch.gather(pos, 1, keep[..., None].expand(-1, -1, d))
        for block in self.encoder:
            x = block(x)
        x = self.encoder_norm(x)

        full = self.mask_token_v.expand(batch, n_patches, -1) + pos
        return full.scatter(1, keep[..., None].expand(-1, -1, d), x)

    def embed_text(
        self, context_ids: torch.Tensor, context_masked: Optional[torch.Tensor] = None
    ) -> torch.Tensor:
        """F_l: one embedding table plus learned positions; masked ids become MASK_L."""
        length = context_ids.shape[1]
        if length > self.pos_embed_l.shape[1]:
            raise ShapeMismatch((self.pos_embed_l.shape[1],), (length,), what="context")
        ids = context_ids
        if context_masked is not None:
            ids = ids.masked_fill(context_masked, self.mask_id)
        return self.token_embed(ids) + self.pos_embed_l[:, :length]

    def visual_head(self, f_v: torch.Tensor, layer: int = 0) -> torch.Tensor:
        """Patch pixels from visual features."""
        return self.visual_heads[0 if self.config.share_heads else layer](f_v)

    def linguistic_head(self, f_q: torch.Tensor, layer: int = 0) -> torch.Tensor:
        """Vocabulary logits from query features."""
        return self.linguistic_heads[0 if self.config.share_heads else layer](f_q)

    def decode(
        self,
        f_v: torch.Tensor,
        f_l: torch.Tensor,
        allow: torch.Tensor,
    ) -> DecoderTrace:
        """Run the N_d decoder layers and both heads at every layer.

        ``allow`` covers the character and EOS query rows; the visual-stream
        row is appended here with a BOS-only mask.
        """
        batch = f_v.shape[0]
        query_len = allow.shape[1]
        if query_len > self.config.query_len:
            raise MaskShapeMismatch((self.config.query_len, f_l.shape[1]), tuple(allow.shape[1:]))
        queries = self.query_tokens[:, :query_len].expand(batch, -1, -1)
        f_q = torch.cat([queries, self.visual_query.expand(batch, -1, -1)], dim=1)
        visual_row = torch.zeros(batch, 1, allow.shape[2], dtype=torch.bool, device=allow.device)
        visual_row[..., 0] = True
        allow = torch.cat([allow, visual_row], dim=1)

        trace = DecoderTrace(f_v=f_v, f_l=f_l)
        for n, layer in enumerate(self.decoder):
            f_v, f_q, h_v, h_q = layer(f_v, f_q, f_l, allow)
            trace.layers.append(
                LayerTrace(
                    h_v=h_v,
                    h_q=h_q[:, :-1],
                    f_v=f_v,
                    f_q=f_q[:, :-1],
                    pixels=self.visual_head(f_v, n),
                    logits=self.linguistic_head(f_q[:, :-1], n),
                )
            )
        return trace

    def forward(self, inputs: ReaderInputs) -> DecoderTrace:
        f_v = self.encode_image(inputs.patches, inputs.visual_mask)
        f_l = self.embed_text(inputs.context_ids, inputs.context_masked)
        return self.decode(f_v, f_l, inputs.allow)
