"""Noise schedules, the training objective, guidance, and samplers.

The base schedule is cosine in log-SNR; moving to n joint views shifts every
log-SNR down by ln(n) (equivalently alpha_bar' = alpha_bar / (alpha_bar +
n*(1-alpha_bar))), pushing training toward higher noise. Training optimizes only
the adapter under per-sample condition dropout; inference composes three noise
predictions with separate image and text guidance scales, never dropping the
conditioning maps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
import torch

from . import geometry
from .backbone import (
    DenoiserBackbone,
    ReferenceFeatures,
    TextCondition,
    to_image,
    to_signal,
)
from .numerics import DomainError, NumericError, Rng, ShapeError

DEFAULT_TIME_STEPS = 1000
DEFAULT_SAMPLE_STEPS = 50


@dataclass
class NoiseSchedule:
    T: int
    n_views: int
    alpha_bar: np.ndarray  # [T], strictly decreasing in (0, 1)
    log_snr: np.ndarray  # [T], lambda_t = log(alpha_bar / (1 - alpha_bar))


def make_schedule(T: int = DEFAULT_TIME_STEPS, n_views: int = 1) -> NoiseSchedule:
    """Cosine-in-log-SNR schedule with the ln(n_views) shift applied exactly."""
    if T < 2:
        raise DomainError("schedule needs at least 2 steps")
    if n_views < 1:
        raise DomainError("n_views must be >= 1")
    u = (np.arange(T, dtype=np.float64) + 0.5) / T
    log_snr = -2.0 * np.log(np.tan(math.pi * u / 2.0)) - math.log(n_views)
    alpha_bar = 1.0 / (1.0 + np.exp(-log_snr))
    if not (np.diff(alpha_bar) < 0).all() or not (np.diff(log_snr) < 0).all():
        raise NumericError("schedule is not strictly decreasing")
    if alpha_bar.min() <= 0 or alpha_bar.max() >= 1:
        raise NumericError("alpha_bar left (0, 1)")
    return NoiseSchedule(T=T, n_views=n_views, alpha_bar=alpha_bar, log_snr=log_snr)


def q_sample(x0: torch.Tensor, t: int, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    if not 0 <= t < sched.T:
        raise DomainError(f"timestep {t} outside [0, {sched.T})")
    if x0.shape != eps.shape:
        raise ShapeError("x0 and eps must share a shape")
    ab = float(sched.alpha_bar[t])
    return math.sqrt(ab) * x0 + math.sqrt(1.0 - ab) * eps


@dataclass
class GuidanceConfig:
    alpha: float = 3.0  # image-condition scale
    beta: float = 3.0  # text-condition scale
    text_only_scale: float = 7.0  # used when no image condition exists

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0 or self.text_only_scale < 0:
            raise DomainError("guidance scales must be >= 0")


@dataclass
class DropoutPolicy:
    p_text: float = 0.1
    p_image: float = 0.1
    p_both: float = 0.1

    def __post_init__(self):
        ps = (self.p_text, self.p_image, self.p_both)
        if any(not 0 <= p <= 1 for p in ps) or sum(ps) > 1:
            raise DomainError("dropout probabilities must lie in [0,1] and sum to <= 1")


def sample_dropout(policy: DropoutPolicy, rng: Rng) -> tuple[bool, bool]:
    """One (drop_text, drop_image) event; the three events are mutually exclusive."""
    u = float(rng.uniform())
    if u < policy.p_both:
        return True, True
    if u < policy.p_both + policy.p_text:
        return True, False
    if u < policy.p_both + policy.p_text + policy.p_image:
        return False, True
    return False, False


# --- model invocation -----------------------------------------------------------


def predict_noise(backbone: DenoiserBackbone, adapter, z: torch.Tensor, t, texts: list,
                  refs: Optional[list], cond: Optional[torch.Tensor]) -> torch.Tensor:
    """Grouped denoiser call: z [B, n, 3, h, w] -> eps [B, n, 3, h, w].

    With an adapter, `cond` [B, n, 6, h, w] feeds the guider and `refs` feed the
    image cross-attention; without one, both are ignored and views are denoised
    independently per group.
    """
    injections = None
    if adapter is not None and cond is not None:
        b, n = cond.shape[:2]
        flat = cond.reshape(b * n, *cond.shape[2:]).to(z.dtype)
        injections = adapter.guider_forward(flat, expected_hw=tuple(z.shape[-2:]))
    return backbone.forward_grouped(z, t, texts, injections=injections,
                                    adapter=adapter, refs=refs)


class ReferenceCache:
    """Memoizes frozen-backbone reference features by sample key."""

    def __init__(self, backbone: DenoiserBackbone):
        self.backbone = backbone
        self._store: dict = {}

    def get(self, key, ref_image: torch.Tensor) -> ReferenceFeatures:
        if key not in self._store:
            self._store[key] = self.backbone.extract_reference_features(ref_image)
        return self._store[key]


@dataclass
class TrainItem:
    """One multi-view training tuple, already tensorized."""

    views: torch.Tensor  # [n, 3, h, w] in [0, 1]
    cond: torch.Tensor  # [n, 6, h, w]
    token_ids: list
    ref_image: torch.Tensor  # [3, h, w] in [0, 1]
    key: object = None


def prepare_batch(items: list, backbone: DenoiserBackbone, sched: NoiseSchedule,
                  dropout: DropoutPolicy, rng: Rng,
                  ref_cache: Optional[ReferenceCache] = None):
    """Draw (t, eps, dropout events) per sample and assemble grouped tensors."""
    zs, eps_all, ts, texts, refs, conds = [], [], [], [], [], []
    for item in items:
        t = int(rng.integers(0, sched.T))
        eps = rng.normal_tensor(item.views.shape, item.views.dtype)
        z = q_sample(to_signal(item.views), t, eps, sched)
        drop_text, drop_image = sample_dropout(dropout, rng)
        texts.append(backbone.null_text() if drop_text else backbone.encode_caption(item.token_ids))
        if ref_cache is not None:
            feats = ref_cache.get(item.key, item.ref_image)
        else:
            feats = backbone.extract_reference_features(item.ref_image)
        refs.append(ReferenceFeatures.null_like(feats) if drop_image else feats)
        zs.append(z)
        eps_all.append(eps)
        ts.append(t)
        conds.append(item.cond)
    return (
        torch.stack(zs),
        torch.tensor(ts, dtype=torch.long),
        torch.stack(eps_all),
        texts,
        refs,
        torch.stack(conds),
    )


def batch_loss(backbone: DenoiserBackbone, adapter, prepared) -> torch.Tensor:
    z, t, eps, texts, refs, cond = prepared
    pred = predict_noise(backbone, adapter, z, t, texts,
                         refs if adapter is not None else None,
                         cond if adapter is not None else None)
    return ((pred - eps) ** 2).mean()


def training_step(items: list, backbone: DenoiserBackbone, adapter, sched: NoiseSchedule,
                  dropout: DropoutPolicy, rng: Rng, optimizer: torch.optim.Optimizer,
                  ref_cache: Optional[ReferenceCache] = None) -> float:
    """One optimization step on the adapter; the backbone stays untouched."""
    prepared = prepare_batch(items, backbone, sched, dropout, rng, ref_cache)
    loss = batch_loss(backbone, adapter, prepared)
    if not torch.isfinite(loss):
        t_drawn = prepared[1].tolist()
        raise NumericError(f"non-finite training loss at timesteps {t_drawn}")
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return float(loss.detach())


# --- classifier-free guidance ----------------------------------------------------


def cfg_predict(backbone: DenoiserBackbone, adapter, z: torch.Tensor, text: TextCondition,
                ref: Optional[ReferenceFeatures], cond: torch.Tensor, t: int,
                g: GuidanceConfig) -> torch.Tensor:
    """Guided noise prediction for one group, z [n, 3, h, w].

    Image mode composes three predictions:
    uncond + alpha*(image - uncond) + beta*(text_and_image - image).
    Without an image condition it collapses to two-term text guidance at
    text_only_scale. The conditioning maps are present in every term.
    """
    n = z.shape[0]
    null_text = backbone.null_text()
    if ref is not None:
        null_ref = ReferenceFeatures.null_like(ref)
        zs = z[None].expand(3, *z.shape)
        ts = torch.full((3,), t, dtype=torch.long)
        conds = cond[None].expand(3, *cond.shape)
        out = predict_noise(backbone, adapter, zs, ts, [null_text, null_text, text],
                            [null_ref, ref, ref], conds)
        e_uu, e_ui, e_ti = out[0], out[1], out[2]
        return e_uu + g.alpha * (e_ui - e_uu) + g.beta * (e_ti - e_ui)

    null_ref = null_reference(backbone, z.shape[-2], z.shape[-1])
    zs = z[None].expand(2, *z.shape)
    ts = torch.full((2,), t, dtype=torch.long)
    conds = cond[None].expand(2, *cond.shape)
    out = predict_noise(backbone, adapter, zs, ts, [null_text, text],
                        [null_ref, null_ref], conds)
    e_u, e_t = out[0], out[1]
    return e_u + g.text_only_scale * (e_t - e_u)


def null_reference(backbone: DenoiserBackbone, h: int, w: int) -> ReferenceFeatures:
    """Zeroed reference features with the site shapes for an h x w input."""
    probe = backbone.extract_reference_features(
        torch.zeros(3, h, w, dtype=backbone.conv_in.weight.dtype)
    )
    return ReferenceFeatures.null_like(probe)


# --- sampling --------------------------------------------------------------------


def sample_timesteps(T: int, steps: int) -> list[int]:
    """Uniform-stride descending subsequence ending at step 0's neighbor of T-1."""
    if not 1 <= steps <= T:
        raise DomainError(f"steps {steps} outside [1, {T}]")
    return [round((k + 1) * T / steps) - 1 for k in range(steps)]


def ddpm_sample(backbone: DenoiserBackbone, adapter, text: TextCondition,
                ref: Optional[ReferenceFeatures], cond: torch.Tensor,
                sched: NoiseSchedule, g: GuidanceConfig, rng: Rng,
                steps: int = DEFAULT_SAMPLE_STEPS,
                on_step: Optional[Callable] = None) -> torch.Tensor:
    """Ancestral DDPM from pure noise; returns [n, 3, h, w] images in [0, 1].

    Noise draw order (fixed for reproducibility): one [n,3,h,w] draw for the
    initial state, then one per transition except the last.
    """
    n = cond.shape[0]
    h, w = cond.shape[-2:]
    dtype = backbone.conv_in.weight.dtype
    ts = sample_timesteps(sched.T, steps)
    z = rng.normal_tensor((n, 3, h, w), dtype)
    with torch.no_grad():
        for k in reversed(range(len(ts))):
            t = ts[k]
            ab_t = float(sched.alpha_bar[t])
            ab_prev = float(sched.alpha_bar[ts[k - 1]]) if k > 0 else 1.0
            eps_hat = cfg_predict(backbone, adapter, z, text, ref, cond, t, g)
            x0 = (z - math.sqrt(1.0 - ab_t) * eps_hat) / math.sqrt(ab_t)
            x0 = x0.clamp(-1.0, 1.0)
            alpha_step = ab_t / ab_prev
            beta_step = 1.0 - alpha_step
            mean = (
                math.sqrt(ab_prev) * beta_step / (1.0 - ab_t) * x0
                + math.sqrt(alpha_step) * (1.0 - ab_prev) / (1.0 - ab_t) * z
            )
            if k > 0:
                var = beta_step * (1.0 - ab_prev) / (1.0 - ab_t)
                z = mean + math.sqrt(var) * rng.normal_tensor((n, 3, h, w), dtype)
            else:
                z = mean
            if on_step is not None:
                on_step(k, z)
    return to_image(z)


# --- arbitrary view synthesis -----------------------------------------------------


def angular_distance(a: geometry.CameraPose, b: geometry.CameraPose) -> float:
    """Great-circle distance between the two view directions, in radians."""
    pa = -np.asarray(a.frame()[2])
    pb = -np.asarray(b.frame()[2])
    return float(np.arccos(np.clip(pa @ pb, -1.0, 1.0)))


def cluster_targets(targets: list, max_size: int = 8) -> list[list[int]]:
    """Greedy angular clustering into groups of at most max_size indices."""
    if not targets:
        raise DomainError("no target views to cluster")
    remaining = list(range(len(targets)))
    clusters = []
    while remaining:
        seed = remaining[0]
        by_dist = sorted(remaining, key=lambda i: (angular_distance(targets[seed], targets[i]), i))
        take = by_dist[:max_size]
        clusters.append(sorted(take))
        remaining = [i for i in remaining if i not in take]
    return clusters


def select_anchor_indices(anchors: list, cluster_poses: list, k: int = 4) -> list[int]:
    """The k anchors minimizing summed angular distance to the cluster."""
    totals = [
        (sum(angular_distance(a, p) for p in cluster_poses), i) for i, a in enumerate(anchors)
    ]
    return [i for _, i in sorted(totals)[:k]]


@dataclass
class ArbitraryViewRun:
    images: torch.Tensor  # [len(targets), 3, h, w]
    anchor_images: torch.Tensor  # [8, 3, h, w]
    clusters: list  # list of index lists
    anchor_choices: list  # per cluster, the 4 anchor indices used


def arbitrary_view_generate(backbone: DenoiserBackbone, adapter, init,
                            targets: list, sched: NoiseSchedule, g: GuidanceConfig,
                            rng: Rng, h: int, w: int,
                            film_extent: float = geometry.FILM_EXTENT,
                            steps: int = DEFAULT_SAMPLE_STEPS) -> ArbitraryViewRun:
    """Two-round synthesis: 8 anchor views first, then clustered target views.

    `init` is a reference image [3, h, w] or a caption token-id list. Each target
    cluster is conditioned on its 4 nearest anchors, concatenated horizontally
    into one long image and re-encoded by the frozen backbone.
    """
    if not targets:
        raise DomainError("no target views requested")
    anchors = geometry.camera_set(geometry.ANCHOR)
    anchor_cond = _raymap_stack(anchors, h, w, film_extent, backbone)

    if isinstance(init, torch.Tensor):
        text = backbone.null_text()
        ref = backbone.extract_reference_features(init)
    else:
        text = backbone.encode_caption(list(init))
        ref = None
    anchor_images = ddpm_sample(backbone, adapter, text, ref, anchor_cond, sched, g,
                                rng, steps=steps)

    clusters = cluster_targets(targets)
    out = torch.zeros(len(targets), 3, h, w, dtype=anchor_images.dtype)
    choices = []
    for cluster in clusters:
        sel = select_anchor_indices(anchors, [targets[i] for i in cluster])
        choices.append(sel)
        long_image = torch.cat([anchor_images[i] for i in sel], dim=2)
        cluster_ref = backbone.extract_reference_features(long_image)
        cond = _raymap_stack([targets[i] for i in cluster], h, w, film_extent, backbone)
        views = ddpm_sample(backbone, adapter, text, cluster_ref, cond, sched, g,
                            rng, steps=steps)
        for slot, i in enumerate(cluster):
            out[i] = views[slot]
    return ArbitraryViewRun(out, anchor_images, clusters, choices)


def _raymap_stack(poses: list, h: int, w: int, film_extent: float,
                  backbone: DenoiserBackbone) -> torch.Tensor:
    dtype = backbone.conv_in.weight.dtype
    maps = [geometry.compute_raymap(p, h, w, film_extent) for p in poses]
    return torch.from_numpy(np.stack(maps)).to(dtype)
