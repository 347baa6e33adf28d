"""The multi-view adapter: condition guider plus decoupled attention layers.

Every backbone self-attention site gets two new attention layers, duplicated from
the backbone's weights with zero output projections: a multi-view attention (three
token scopes: row_wise, row_column, full) and an image cross-attention that reads
reference features extracted by the frozen backbone. In the parallel architecture
all branches consume the same normalized input as the original self-attention and
their residuals sum; the serial variant (kept for the ablation) chains them after
the self-attention residual instead. The adapter owns no backbone tensors and no
norms, so it serializes and plugs independently.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch
from torch import nn

from .backbone import AttentionBlock, DenoiserBackbone, TextCondition, _PassContext
from .numerics import DomainError, Rng, ShapeError

ROW_WISE = "row_wise"
ROW_COLUMN = "row_column"
FULL = "full"
MV_MODES = (ROW_WISE, ROW_COLUMN, FULL)

PARALLEL = "parallel"
SERIAL = "serial"
ARCHS = (PARALLEL, SERIAL)


@dataclass
class ConditioningMaps:
    data: torch.Tensor  # [n, 6, h, w]
    kind: str  # "raymap" or "geometry"


class AttentionProjections(nn.Module):
    """Q/K/V/O projection set shaped identically to a backbone self-attention."""

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.scale = dim**-0.5
        self.wq = nn.Linear(dim, dim, bias=False)
        self.wk = nn.Linear(dim, dim, bias=False)
        self.wv = nn.Linear(dim, dim, bias=False)
        self.wo = nn.Linear(dim, dim, bias=False)

    def context(self, q_tokens: torch.Tensor, kv_tokens: torch.Tensor) -> torch.Tensor:
        """Attention context (softmax(QK^T)V) without the output projection."""
        q = self.wq(q_tokens)
        k = self.wk(kv_tokens)
        v = self.wv(kv_tokens)
        return torch.softmax(self.scale * (q @ k.transpose(-1, -2)), dim=-1) @ v


class DecoupledBlockWeights(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.mv = AttentionProjections(dim)
        self.img = AttentionProjections(dim)


def _group_rows(x: torch.Tensor, b: int, n: int, hh: int, ww: int) -> torch.Tensor:
    d = x.shape[-1]
    return x.reshape(b, n, hh, ww, d).permute(0, 2, 1, 3, 4).reshape(b * hh, n * ww, d)


def _ungroup_rows(x: torch.Tensor, b: int, n: int, hh: int, ww: int) -> torch.Tensor:
    d = x.shape[-1]
    return x.reshape(b, hh, n, ww, d).permute(0, 2, 1, 3, 4).reshape(b * n, hh * ww, d)


def _group_cols(x: torch.Tensor, b: int, n: int, hh: int, ww: int) -> torch.Tensor:
    d = x.shape[-1]
    return x.reshape(b, n, hh, ww, d).permute(0, 3, 1, 2, 4).reshape(b * ww, n * hh, d)


def _ungroup_cols(x: torch.Tensor, b: int, n: int, hh: int, ww: int) -> torch.Tensor:
    d = x.shape[-1]
    return x.reshape(b, ww, n, hh, d).permute(0, 2, 3, 1, 4).reshape(b * n, hh * ww, d)


def mv_attention_tokens(weights: AttentionProjections, tokens: torch.Tensor,
                        b: int, n: int, hh: int, ww: int, mode: str) -> torch.Tensor:
    """Multi-view attention over grouped tokens [b*n, hh*ww, d].

    row_wise restricts each token's scope to the n*ww tokens sharing its row index
    across views; row_column runs a row pass then a column pass with the same
    projections; full attends over all n*hh*ww tokens of the group. The output
    projection is applied once, last.
    """
    if mode == ROW_WISE:
        g = _group_rows(tokens, b, n, hh, ww)
        out = weights.context(g, g)
        return weights.wo(_ungroup_rows(out, b, n, hh, ww))
    if mode == ROW_COLUMN:
        g = _group_rows(tokens, b, n, hh, ww)
        mid = _ungroup_rows(weights.context(g, g), b, n, hh, ww)
        g2 = _group_cols(mid, b, n, hh, ww)
        out = _ungroup_cols(weights.context(g2, g2), b, n, hh, ww)
        return weights.wo(out)
    if mode == FULL:
        d = tokens.shape[-1]
        g = tokens.reshape(b, n * hh * ww, d)
        out = weights.context(g, g)
        return weights.wo(out.reshape(b * n, hh * ww, d))
    raise DomainError(f"unknown multi-view attention mode {mode!r}")


def img_cross_tokens(weights: AttentionProjections, tokens: torch.Tensor,
                     ref_entry: torch.Tensor, b: int, n: int) -> torch.Tensor:
    """Image cross-attention: queries from the views, keys/values from ref features.

    tokens [b*n, s, d]; ref_entry [b, s_k, d]. A null (all-zero) reference yields
    uniform weights over zero values, hence an exactly zero output.
    """
    if ref_entry.shape[-1] != tokens.shape[-1]:
        raise ShapeError(
            f"reference feature dim {ref_entry.shape[-1]} does not match site dim {tokens.shape[-1]}"
        )
    s = tokens.shape[1]
    d = tokens.shape[2]
    q = tokens.reshape(b, n * s, d)
    out = weights.context(q, ref_entry)
    return weights.wo(out.reshape(b * n, s, d))


def _compose(site: DecoupledBlockWeights, mv_mode: str, arch: str, tokens: torch.Tensor,
             sa: torch.Tensor, x_tok: torch.Tensor, ref_entry: Optional[torch.Tensor],
             b: int, n: int, hw: tuple) -> torch.Tensor:
    hh, ww = hw
    if arch == PARALLEL:
        mv = mv_attention_tokens(site.mv, tokens, b, n, hh, ww, mv_mode)
        out = sa + mv
        if ref_entry is not None:
            out = out + img_cross_tokens(site.img, tokens, ref_entry, b, n)
        return out + x_tok
    if arch == SERIAL:
        f1 = sa + x_tok
        f2 = mv_attention_tokens(site.mv, f1, b, n, hh, ww, mv_mode) + f1
        if ref_entry is not None:
            f2 = img_cross_tokens(site.img, f2, ref_entry, b, n) + f2
        return f2
    raise DomainError(f"unknown adapter architecture {arch!r}")


class ConditionGuider(nn.Module):
    """Convolutional encoder of the 6-channel conditioning maps.

    One output per backbone encoder stage, shaped to add onto that stage's
    activations; every per-scale projection starts at zero so a fresh guider is
    silent. Purely per-view (no cross-view mixing).
    """

    def __init__(self, stage_channels: list, hidden: int = 16):
        super().__init__()
        self.hidden = hidden
        self.stem = nn.Conv2d(6, hidden, 3, padding=1)
        self.blocks = nn.ModuleList(
            nn.Conv2d(hidden, hidden, 3, padding=1) for _ in stage_channels
        )
        self.downs = nn.ModuleList(
            nn.Conv2d(hidden, hidden, 3, stride=2, padding=1) for _ in stage_channels[1:]
        )
        self.projs = nn.ModuleList(nn.Conv2d(hidden, c, 1, bias=False) for c in stage_channels)

    def forward(self, cond: torch.Tensor) -> list:
        """cond [N, 6, h, w] -> one [N, C_i, h_i, w_i] tensor per encoder scale."""
        feats = []
        h = nn.functional.silu(self.stem(cond))
        for i, (block, proj) in enumerate(zip(self.blocks, self.projs)):
            if i > 0:
                h = nn.functional.silu(self.downs[i - 1](h))
            h = nn.functional.silu(block(h))
            feats.append(proj(h))
        return feats


class MultiViewAdapter(nn.Module):
    """Guider plus one decoupled attention block per backbone attention site."""

    def __init__(self, site_dims: list, stage_channels: list, mv_mode: str,
                 arch: str = PARALLEL, guider_hidden: int = 16,
                 backbone_digest: str = ""):
        super().__init__()
        if mv_mode not in MV_MODES:
            raise DomainError(f"unknown mv_mode {mv_mode!r}")
        if arch not in ARCHS:
            raise DomainError(f"unknown arch {arch!r}")
        self.mv_mode = mv_mode
        self.arch = arch
        self.backbone_digest = backbone_digest
        self.guider = ConditionGuider(stage_channels, guider_hidden)
        self.blocks = nn.ModuleList(DecoupledBlockWeights(d) for d in site_dims)

    def compose(self, site_index: int, tokens, sa, x_tok, ref_entry, b, n, hw):
        site = self.blocks[site_index]
        return _compose(site, self.mv_mode, self.arch, tokens, sa, x_tok, ref_entry, b, n, hw)

    def guider_forward(self, cond: torch.Tensor, expected_hw: Optional[tuple] = None) -> list:
        if cond.dim() != 4 or cond.shape[1] != 6:
            raise ShapeError(f"conditioning maps must be [n, 6, h, w], got {tuple(cond.shape)}")
        if expected_hw is not None and tuple(cond.shape[2:]) != tuple(expected_hw):
            raise ShapeError(
                f"conditioning resolution {tuple(cond.shape[2:])} != model input {expected_hw}"
            )
        return self.guider(cond)


def init_adapter(backbone: DenoiserBackbone, mv_mode: str, arch: str, rng: Rng,
                 guider_hidden: int = 16) -> MultiViewAdapter:
    """Duplicate the backbone's self-attention weights into a fresh adapter.

    Q/K/V projections are copied bit-exactly from each sibling self-attention;
    all output projections (attention and guider) start at zero, so attaching the
    fresh adapter leaves the backbone's function unchanged.
    """
    sites = backbone.attention_sites()
    cfg = backbone.config
    stage_channels = [cfg.stage_channels(i) for i in range(cfg.num_stages)]
    adapter = MultiViewAdapter(
        site_dims=[s.channels for s in sites],
        stage_channels=stage_channels,
        mv_mode=mv_mode,
        arch=arch,
        guider_hidden=guider_hidden,
        backbone_digest=cfg.digest(),
    )
    with torch.no_grad():
        for site, block in zip(sites, adapter.blocks):
            for proj in (block.mv, block.img):
                proj.wq.weight.copy_(site.attn.wq.weight)
                proj.wk.weight.copy_(site.attn.wk.weight)
                proj.wv.weight.copy_(site.attn.wv.weight)
                proj.wo.weight.zero_()
        for name, p in adapter.guider.named_parameters():
            if name.startswith("projs."):
                p.zero_()
            elif name.endswith(".bias"):
                p.zero_()
            else:
                fan_in = p.shape[1] * p.shape[2] * p.shape[3]
                p.copy_(rng.trunc_normal_tensor(p.shape, std=(2.0 / fan_in) ** 0.5, dtype=p.dtype))
    return adapter


# --- spec-level single-group surfaces ------------------------------------------


def multi_view_attention(f: torch.Tensor, weights: AttentionProjections, mode: str) -> torch.Tensor:
    """Multi-view attention over one group of views, f [n, h, w, d]."""
    n, hh, ww, d = f.shape
    tokens = f.reshape(n, hh * ww, d)
    out = mv_attention_tokens(weights, tokens, 1, n, hh, ww, mode)
    return out.reshape(n, hh, ww, d)


def image_cross_attention(f: torch.Tensor, ref_entry: torch.Tensor,
                          weights: AttentionProjections) -> torch.Tensor:
    """Image cross-attention for a single view's tokens, f [s, d], ref [s_k, d]."""
    out = img_cross_tokens(weights, f[None], ref_entry[None], 1, 1)
    return out[0]


class _SoloSite:
    """Adapter shim exposing exactly one decoupled block to a backbone block."""

    def __init__(self, site: DecoupledBlockWeights, mv_mode: str, arch: str):
        self.site = site
        self.mv_mode = mv_mode
        self.arch = arch

    def compose(self, site_index, tokens, sa, x_tok, ref_entry, b, n, hw):
        return _compose(self.site, self.mv_mode, self.arch, tokens, sa, x_tok,
                        ref_entry, b, n, hw)


def decoupled_block(block: AttentionBlock, site: DecoupledBlockWeights,
                    f_in: torch.Tensor, text: TextCondition,
                    ref_entry: Optional[torch.Tensor], mv_mode: str, arch: str) -> torch.Tensor:
    """Run one backbone attention block with the decoupled branches attached.

    f_in [n, c, h, w]; ref_entry [s_k, d] or None. parallel follows the one-sum
    residual (self + multi-view + image-cross + input) before the untouched text
    cross-attention; serial chains the residuals instead.
    """
    n = f_in.shape[0]
    ctx = _PassContext(
        groups=1,
        views=n,
        text_emb=text.embeddings[None].to(f_in.dtype),
        adapter=_SoloSite(site, mv_mode, arch),
        ref_entries=None if ref_entry is None else {block.site_index: ref_entry[None]},
    )
    return block(f_in, ctx)
