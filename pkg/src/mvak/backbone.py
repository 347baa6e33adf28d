"""Miniature frozen text-to-image denoising U-Net.

The backbone is the stand-in for a large pretrained T2I model: it is pretrained
briefly as a single-view text-to-image denoiser, then frozen. Its attention blocks
follow the serial residual pattern (self-attention then text cross-attention, each
with a pre-GroupNorm), and its frozen copy doubles as the reference-image feature
extractor: a t=0 forward pass that records, at every self-attention site, the
normalized hidden states feeding the self-attention.

Views are always processed as one batch (groups x views flattened); switching
between batched and per-view execution would break the bit-exactness contracts.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import torch
from torch import nn

from . import vocab
from .numerics import DomainError, Rng, ShapeError, sinusoidal_embedding

ATTN_INPUT = "attn_input"
ATTN_OUTPUT = "attn_output"


def to_signal(x: torch.Tensor) -> torch.Tensor:
    """Pixel [0,1] -> model space [-1,1]."""
    return 2.0 * x - 1.0


def to_image(z: torch.Tensor) -> torch.Tensor:
    """Model space -> pixel [0,1], clamped."""
    return ((z + 1.0) * 0.5).clamp(0.0, 1.0)


@dataclass(frozen=True)
class BackboneConfig:
    base_channels: int = 32
    channel_mults: tuple = (1, 2, 4)
    blocks_per_stage: int = 1
    attn_stages: Optional[tuple] = None  # None means every stage
    text_dim: int = 64
    vocab_size: int = vocab.VOCAB_SIZE
    image_size: tuple = (32, 32)
    time_embed_dim: int = 128
    time_steps: int = 1000
    groups: int = 8
    max_tokens: int = vocab.MAX_TOKENS
    ref_features: str = ATTN_INPUT

    def __post_init__(self):
        factor = 2 ** (len(self.channel_mults) - 1)
        h, w = self.image_size
        if h % factor or w % factor:
            raise DomainError(f"image size {self.image_size} not divisible by {factor}")
        for m in self.channel_mults:
            if (self.base_channels * m) % self.groups:
                raise DomainError("stage channels must be divisible by norm groups")
        if self.ref_features not in (ATTN_INPUT, ATTN_OUTPUT):
            raise DomainError(f"unknown ref_features {self.ref_features!r}")

    @property
    def num_stages(self) -> int:
        return len(self.channel_mults)

    def stage_channels(self, i: int) -> int:
        return self.base_channels * self.channel_mults[i]

    def attn_at(self, stage: int) -> bool:
        return self.attn_stages is None or stage in self.attn_stages

    def digest(self) -> str:
        blob = json.dumps(
            {k: list(v) if isinstance(v, tuple) else v for k, v in self.__dict__.items()},
            sort_keys=True,
        )
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def with_image_size(self, h: int, w: int) -> "BackboneConfig":
        return replace(self, image_size=(h, w))


@dataclass
class TextCondition:
    token_ids: list
    embeddings: torch.Tensor  # [max_tokens, text_dim]
    is_null: bool


@dataclass
class ReferenceFeatures:
    entries: list  # one [s_k, d] tensor per attention site
    null: bool = False

    @staticmethod
    def null_like(other: "ReferenceFeatures") -> "ReferenceFeatures":
        return ReferenceFeatures([torch.zeros_like(e) for e in other.entries], null=True)


@dataclass
class _PassContext:
    """Per-forward state threaded through the attention blocks."""

    groups: int
    views: int
    text_emb: torch.Tensor  # [B, L, text_dim]
    adapter: object = None
    ref_entries: Optional[list] = None  # per site: [B, s_k, d]
    collect: Optional[list] = None
    ref_source: str = ATTN_INPUT


class SelfAttention(nn.Module):
    """Single-head scaled dot-product attention with separate Q/K/V/O projections."""

    def __init__(self, dim: int):
        super().__init__()
        self.dim = dim
        self.scale = dim**-0.5
        self.wq = nn.Linear(dim, dim, bias=False)
        self.wk = nn.Linear(dim, dim, bias=False)
        self.wv = nn.Linear(dim, dim, bias=False)
        self.wo = nn.Linear(dim, dim, bias=False)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        q, k, v = self.wq(tokens), self.wk(tokens), self.wv(tokens)
        attn = torch.softmax(self.scale * (q @ k.transpose(-1, -2)), dim=-1) @ v
        return self.wo(attn)


class TextCrossAttention(nn.Module):
    def __init__(self, dim: int, text_dim: int):
        super().__init__()
        self.scale = dim**-0.5
        self.wq = nn.Linear(dim, dim, bias=False)
        self.wk = nn.Linear(text_dim, dim, bias=False)
        self.wv = nn.Linear(text_dim, dim, bias=False)
        self.wo = nn.Linear(dim, dim, bias=False)

    def forward(self, tokens: torch.Tensor, text_emb: torch.Tensor, views: int) -> torch.Tensor:
        # tokens [B*n, s, d]; text_emb [B, L, text_dim] shared by each group's views
        k, v = self.wk(text_emb), self.wv(text_emb)
        k = k.repeat_interleave(views, dim=0)
        v = v.repeat_interleave(views, dim=0)
        q = self.wq(tokens)
        attn = torch.softmax(self.scale * (q @ k.transpose(-1, -2)), dim=-1) @ v
        return self.wo(attn)


class AttentionBlock(nn.Module):
    """Serial residual attention: f_self = SelfAttn(norm(f)) + f, then text cross.

    With an adapter attached, the self-attention residual is replaced by the
    adapter's decoupled composition; the text cross-attention stays untouched.
    """

    def __init__(self, channels: int, text_dim: int, groups: int):
        super().__init__()
        self.channels = channels
        self.norm1 = nn.GroupNorm(groups, channels)
        self.attn = SelfAttention(channels)
        self.norm2 = nn.GroupNorm(groups, channels)
        self.cross = TextCrossAttention(channels, text_dim)
        self.site_index = -1  # assigned by the backbone

    def forward(self, x: torch.Tensor, ctx: _PassContext) -> torch.Tensor:
        bn, c, hh, ww = x.shape
        tokens = self.norm1(x).reshape(bn, c, hh * ww).transpose(1, 2)
        x_tok = x.reshape(bn, c, hh * ww).transpose(1, 2)
        if ctx.collect is not None and ctx.ref_source == ATTN_INPUT:
            ctx.collect.append(tokens)
        sa = self.attn(tokens)
        if ctx.collect is not None and ctx.ref_source == ATTN_OUTPUT:
            ctx.collect.append(sa + x_tok)
        if ctx.adapter is None:
            f_self = sa + x_tok
        else:
            ref = None if ctx.ref_entries is None else ctx.ref_entries[self.site_index]
            f_self = ctx.adapter.compose(self.site_index, tokens, sa, x_tok, ref,
                                         ctx.groups, ctx.views, (hh, ww))
        spatial = f_self.transpose(1, 2).reshape(bn, c, hh, ww)
        h2 = self.norm2(spatial).reshape(bn, c, hh * ww).transpose(1, 2)
        f_cross = self.cross(h2, ctx.text_emb, ctx.views) + f_self
        return f_cross.transpose(1, 2).reshape(bn, c, hh, ww)


class ResidualBlock(nn.Module):
    def __init__(self, c_in: int, c_out: int, time_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(groups, c_in)
        self.conv1 = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.time_proj = nn.Linear(time_dim, c_out)
        self.norm2 = nn.GroupNorm(groups, c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)
        self.skip = nn.Conv2d(c_in, c_out, 1) if c_in != c_out else nn.Identity()

    def forward(self, x: torch.Tensor, temb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(nn.functional.silu(self.norm1(x)))
        h = h + self.time_proj(nn.functional.silu(temb))[:, :, None, None]
        h = self.conv2(nn.functional.silu(self.norm2(h)))
        return h + self.skip(x)


class Downsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return self.conv(nn.functional.interpolate(x, scale_factor=2, mode="nearest"))


class DenoiserBackbone(nn.Module):
    """U-Net denoiser: paired encoder/decoder stages around a middle block."""

    def __init__(self, config: BackboneConfig, rng: Rng):
        super().__init__()
        self.config = config
        c0 = config.stage_channels(0)
        td = config.time_embed_dim

        self.time_mlp = nn.Sequential(
            nn.Linear(td, td), nn.SiLU(), nn.Linear(td, td)
        )
        self.token_embed = nn.Embedding(config.vocab_size, config.text_dim)
        self.pos_embed = nn.Parameter(torch.zeros(config.max_tokens, config.text_dim))

        self.conv_in = nn.Conv2d(3, c0, 3, padding=1)
        self._attention_blocks: list[AttentionBlock] = []

        def attn(ch):
            block = AttentionBlock(ch, config.text_dim, config.groups)
            block.site_index = len(self._attention_blocks)
            self._attention_blocks.append(block)
            return block

        skip_chs = [c0]
        ch = c0
        self.enc_blocks = nn.ModuleList()
        self.enc_attns = nn.ModuleList()
        self.downs = nn.ModuleList()
        for i in range(config.num_stages):
            out_ch = config.stage_channels(i)
            blocks = nn.ModuleList()
            attns = nn.ModuleList()
            for _ in range(config.blocks_per_stage):
                blocks.append(ResidualBlock(ch, out_ch, td, config.groups))
                attns.append(attn(out_ch) if config.attn_at(i) else nn.Identity())
                ch = out_ch
                skip_chs.append(ch)
            self.enc_blocks.append(blocks)
            self.enc_attns.append(attns)
            if i < config.num_stages - 1:
                self.downs.append(Downsample(ch))
                skip_chs.append(ch)

        self.mid_block1 = ResidualBlock(ch, ch, td, config.groups)
        self.mid_attn = attn(ch)
        self.mid_block2 = ResidualBlock(ch, ch, td, config.groups)

        self.dec_blocks = nn.ModuleList()
        self.dec_attns = nn.ModuleList()
        self.ups = nn.ModuleList()
        for i in reversed(range(config.num_stages)):
            out_ch = config.stage_channels(i)
            blocks = nn.ModuleList()
            attns = nn.ModuleList()
            for _ in range(config.blocks_per_stage + 1):
                blocks.append(ResidualBlock(ch + skip_chs.pop(), out_ch, td, config.groups))
                attns.append(attn(out_ch) if config.attn_at(i) else nn.Identity())
                ch = out_ch
            self.dec_blocks.append(blocks)
            self.dec_attns.append(attns)
            self.ups.append(Upsample(ch) if i > 0 else nn.Identity())

        self.out_norm = nn.GroupNorm(config.groups, ch)
        self.conv_out = nn.Conv2d(ch, 3, 3, padding=1)

        self._init_weights(rng)

    # --- construction ---------------------------------------------------------

    def _init_weights(self, rng: Rng) -> None:
        proj_names = (".wq.", ".wk.", ".wv.", ".wo.")
        for name, p in self.named_parameters():
            if name.endswith(".bias"):
                nn.init.zeros_(p)
            elif "norm" in name:
                nn.init.ones_(p)
            elif name.startswith(("token_embed", "pos_embed")) or any(s in name for s in proj_names):
                p.data.copy_(rng.trunc_normal_tensor(p.shape, std=0.02, dtype=p.dtype))
            else:
                fan_in = p.shape[1] * (p.shape[2] * p.shape[3] if p.dim() == 4 else 1)
                std = (2.0 / fan_in) ** 0.5
                p.data.copy_(rng.trunc_normal_tensor(p.shape, std=std, dtype=p.dtype))

    def attention_sites(self) -> list[AttentionBlock]:
        return list(self._attention_blocks)

    def freeze(self) -> "DenoiserBackbone":
        for p in self.parameters():
            p.requires_grad_(False)
        return self

    # --- text ------------------------------------------------------------------

    def null_text(self) -> TextCondition:
        emb = self.token_embed.weight[vocab.NULL_ID].expand(self.config.max_tokens, -1)
        return TextCondition([], emb, is_null=True)

    def encode_caption(self, token_ids: Sequence[int]) -> TextCondition:
        """Embedding lookup plus learned positional offsets, padded to max_tokens."""
        ids = list(token_ids)
        if not ids:
            return self.null_text()
        if len(ids) > self.config.max_tokens:
            raise DomainError(f"caption longer than {self.config.max_tokens} tokens")
        if any(not 0 <= t < self.config.vocab_size for t in ids):
            raise DomainError("caption token id out of range")
        padded = ids + [vocab.NULL_ID] * (self.config.max_tokens - len(ids))
        idx = torch.tensor(padded, dtype=torch.long)
        emb = self.token_embed(idx) + self.pos_embed
        return TextCondition(ids, emb, is_null=False)

    # --- forward ----------------------------------------------------------------

    def forward_grouped(self, z: torch.Tensor, t: torch.Tensor, texts: list,
                        injections: Optional[list] = None,
                        adapter: object = None,
                        refs: Optional[list] = None,
                        decoder_injections: Optional[list] = None,
                        collect: Optional[list] = None) -> torch.Tensor:
        """Denoise B groups of n views each: z [B, n, 3, h, w] -> eps [B, n, 3, h, w].

        Views inside a group interact only through the adapter's multi-view
        attention; groups never interact. `t` is [B] (shared per group) or [B, n].
        """
        b, n, c, h, w = z.shape
        if len(texts) != b:
            raise ShapeError(f"{len(texts)} text conditions for {b} groups")
        t = torch.as_tensor(t, dtype=torch.long)
        if t.dim() == 1:
            t = t[:, None].expand(b, n)
        if bool((t < 0).any()) or bool((t >= self.config.time_steps).any()):
            raise DomainError(f"timestep outside [0, {self.config.time_steps})")

        dtype = self.conv_in.weight.dtype
        temb = sinusoidal_embedding(t.reshape(-1).to(dtype), self.config.time_embed_dim)
        temb = self.time_mlp(temb)

        text_emb = torch.stack([tc.embeddings for tc in texts]).to(dtype)
        ref_entries = None
        if refs is not None:
            sites = len(self._attention_blocks)
            ref_entries = [torch.stack([r.entries[s] for r in refs]).to(dtype) for s in range(sites)]
        ctx = _PassContext(groups=b, views=n, text_emb=text_emb, adapter=adapter,
                           ref_entries=ref_entries, collect=collect,
                           ref_source=self.config.ref_features)

        x = z.reshape(b * n, c, h, w).to(dtype)
        hx = self.conv_in(x)
        skips = [hx]
        for i in range(self.config.num_stages):
            last = len(self.enc_blocks[i]) - 1
            for j, (block, ablock) in enumerate(zip(self.enc_blocks[i], self.enc_attns[i])):
                hx = block(hx, temb)
                if not isinstance(ablock, nn.Identity):
                    hx = ablock(hx, ctx)
                if j == last and injections is not None:
                    hx = hx + injections[i]
                skips.append(hx)
            if i < self.config.num_stages - 1:
                hx = self.downs[i](hx)
                skips.append(hx)

        hx = self.mid_block1(hx, temb)
        hx = self.mid_attn(hx, ctx)
        hx = self.mid_block2(hx, temb)

        for d, stage in enumerate(reversed(range(self.config.num_stages))):
            last = len(self.dec_blocks[d]) - 1
            for j, (block, ablock) in enumerate(zip(self.dec_blocks[d], self.dec_attns[d])):
                hx = block(torch.cat([hx, skips.pop()], dim=1), temb)
                if not isinstance(ablock, nn.Identity):
                    hx = ablock(hx, ctx)
                if j == last and decoder_injections is not None:
                    hx = hx + decoder_injections[stage]
            hx = self.ups[d](hx)

        out = self.conv_out(nn.functional.silu(self.out_norm(hx)))
        return out.reshape(b, n, c, h, w)

    def forward(self, z_t: torch.Tensor, t, text: TextCondition,
                injections: Optional[list] = None, adapter: object = None,
                ref: Optional[ReferenceFeatures] = None) -> torch.Tensor:
        """Single-group surface: z_t [n, 3, h, w] -> eps [n, 3, h, w]."""
        n = z_t.shape[0]
        t = torch.as_tensor(t, dtype=torch.long).reshape(-1)
        if t.numel() == 1:
            t = t.expand(n)
        if t.numel() != n:
            raise ShapeError(f"{t.numel()} timesteps for {n} views")
        refs = [ref] if ref is not None else None
        return self.forward_grouped(z_t[None], t[None], [text], injections=injections,
                                    adapter=adapter, refs=refs)[0]

    # --- reference features -----------------------------------------------------

    def extract_reference_features(self, ref_image: torch.Tensor) -> ReferenceFeatures:
        """Run the frozen net at t=0 with null text, recording per-site features.

        `ref_image` is [3, h, w'] in [0,1]; w' may exceed the training width (the
        long-image case) as long as it stays divisible by the downsampling factor.
        """
        collect: list = []
        with torch.no_grad():
            z = to_signal(ref_image.to(self.conv_in.weight.dtype))[None, None]
            self.forward_grouped(z, torch.zeros(1, dtype=torch.long), [self.null_text()],
                                 collect=collect)
        return ReferenceFeatures([e[0].detach().clone() for e in collect], null=False)
