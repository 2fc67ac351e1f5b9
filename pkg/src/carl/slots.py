"""Slot transformer: patch embeddings -> k order-free slot embeddings."""

from dataclasses import dataclass

import torch
from torch import nn

from .layers import DecoderLayer, MultiHeadAttention, attention_weights, positional_encoding

__all__ = [
    "SlotSet",
    "SlotTransformer",
    "inverted_cross_attention",
    "positional_encoding",
    "standard_cross_attention",
]


@dataclass
class SlotSet:
    values: torch.Tensor  # (..., k, d_s)

    @property
    def k(self):
        return self.values.shape[-2]


def cross_attention(queries, context, attn):
    """Apply ``attn`` (a ``MultiHeadAttention``) to unbatched or batched inputs."""
    if queries.dim() == 2:
        return attn(queries[None], context[None])[0]
    return attn(queries, context)


def inverted_cross_attention(queries, context, heads=1, attn=None):
    """Slots compete for patches: slot-axis softmax, then per-slot weighted mean."""
    if attn is None:
        attn = MultiHeadAttention(queries.shape[-1], heads, d_kv=context.shape[-1], kind="inverted")
    elif attn.kind != "inverted":
        raise ValueError("attention module is not configured for inverted attention")
    return cross_attention(queries, context, attn)


def standard_cross_attention(queries, context, heads=1, attn=None):
    """Vanilla cross-attention: patch-axis softmax, no renormalization."""
    if attn is None:
        attn = MultiHeadAttention(queries.shape[-1], heads, d_kv=context.shape[-1], kind="standard")
    elif attn.kind != "standard":
        raise ValueError("attention module is not configured for standard attention")
    return cross_attention(queries, context, attn)


class SlotTransformer(nn.Module):
    """Pre-norm transformer decoder over learned initial slot queries.

    Keys/values are ``Linear(e + pe)``; each layer runs self-attention over
    slots, cross-attention to the patches (inverted by default) and a
    feed-forward block with residuals.
    """

    def __init__(self, d_p, d_s=512, k=6, layers=4, heads=4, attention="inverted"):
        super().__init__()
        self.k = k
        self.d_s = d_s
        self.queries = nn.Parameter(torch.randn(k, d_s) * 0.02)
        self.input_proj = nn.Linear(d_p, d_s)
        self.layers = nn.ModuleList(
            DecoderLayer(d_s, heads, cross_kind=attention) for _ in range(layers)
        )
        for i, layer in enumerate(self.layers):
            layer.self_attn.layer_index = i
            layer.cross_attn.layer_index = i
        self.norm_out = nn.LayerNorm(d_s)

    @property
    def attention(self):
        return self.layers[0].cross_attn.kind if len(self.layers) else "inverted"

    def forward(self, e, pe):
        """``e`` (B, n, d_p) patch embeddings, ``pe`` (n, d_p) -> (B, k, d_s)."""
        if pe.shape != e.shape[-2:]:
            raise ValueError(f"positional grid {tuple(pe.shape)} does not match features {tuple(e.shape[-2:])}")
        context = self.input_proj(e + pe.to(e.dtype))
        s = self.queries.expand(e.shape[0], -1, -1)
        for layer in self.layers:
            s = layer(s, context)
        return self.norm_out(s)


def slot_transform(e, model, pe):
    """Functional wrapper returning a ``SlotSet``."""
    squeeze = e.dim() == 2
    out = model(e[None] if squeeze else e, pe)
    return SlotSet(out[0] if squeeze else out)


def slot_axis_attention(logits):
    """Expose the inverted normalization for inspection: (per-patch softmax, renormalized)."""
    col = logits.softmax(dim=-2)
    return col, attention_weights(logits, "inverted")
