"""Offline analyzers: streaming latency arithmetic, Lipschitz bounds, and the
order-stability probe relating input change to output change across frames.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import _kernels
from .errors import ArgumentError
from .linalg import POWER_MAX_ITERS, POWER_TOL, operator_norm
from .matching import shrink_mask, sigmoid
from .model import RCFModel
from .stream import RefCache, TrackState, infer_frame, mask_iou
from .synthav import SpriteClip
from .tensor import Tensor, no_grad


# ---------------------------------------------------------------------------
# latency


@dataclass
class LatencyModel:
    t_stream: float  # seconds per streamed frame
    t_model: float  # seconds of model time per frame
    n_f: int  # clip length for the offline case

    def __post_init__(self):
        if self.t_stream <= 0 or self.t_model <= 0 or self.n_f <= 0:
            raise ArgumentError("latency model needs strictly positive inputs")

    @property
    def online(self) -> float:
        return self.t_stream + self.t_model

    @property
    def offline(self) -> float:
        return (self.t_stream + self.t_model) * self.n_f


def latency_model(fps_stream: float, fps_model: float, n_f: int = 1) -> tuple[float, float]:
    """(online, offline) per-frame latency in seconds.

    Online waits for one frame to stream and one model pass; offline waits
    for the whole clip to stream and process.
    """
    if fps_stream <= 0 or fps_model <= 0 or n_f <= 0:
        raise ArgumentError("latency model needs strictly positive inputs")
    lm = LatencyModel(t_stream=1.0 / fps_stream, t_model=1.0 / fps_model, n_f=n_f)
    return lm.online, lm.offline


# ---------------------------------------------------------------------------
# Lipschitz bounds


@dataclass
class NormEntry:
    name: str
    kind: str  # conv | linear | attention
    norm: float | None
    note: str = ""


@dataclass
class LipschitzReport:
    p: object
    entries: list[NormEntry] = field(default_factory=list)
    products: dict[str, float] = field(default_factory=dict)
    attention_ratios: dict[str, float] = field(default_factory=dict)


def conv_operator_norm(w: np.ndarray, in_shape: tuple, stride: int, pad: int, p) -> float:
    """Operator norm of the convolution unrolled at the given input extent.

    p=2 runs power iteration with the convolution and its adjoint (no matrix
    is materialized); p=inf evaluates exact row sums by convolving |w| with
    an all-ones input.
    """
    w = np.asarray(getattr(w, "data", w), dtype=np.float64)
    if p in (np.inf, math.inf, "inf"):
        ones = np.ones(in_shape)
        sums = _kernels.conv2d_forward(ones, np.abs(w), stride, pad)
        return float(sums.max())
    if p != 2:
        raise ArgumentError(f"unsupported norm order {p!r} (use 2 or inf)")
    rng = np.random.default_rng(0)
    v = rng.standard_normal(in_shape)
    v /= np.linalg.norm(v.ravel())
    lam = 0.0
    for _ in range(POWER_MAX_ITERS):
        u = _kernels.conv2d_forward(v, w, stride, pad)
        vt = _kernels.conv2d_grad_input(u, w, in_shape, stride, pad)
        lam_new = float((v.ravel() * vt.ravel()).sum())
        norm_vt = np.linalg.norm(vt.ravel())
        if norm_vt == 0.0:
            return 0.0
        v = vt / norm_vt
        if abs(lam_new - lam) <= POWER_TOL * max(1.0, abs(lam_new)):
            lam = lam_new
            break
        lam = lam_new
    return math.sqrt(max(lam, 0.0))


def _flat_norm(x: np.ndarray, p) -> float:
    flat = np.asarray(x, dtype=np.float64).ravel()
    if p == 1:
        return float(np.abs(flat).sum())
    if p == 2:
        return float(np.linalg.norm(flat))
    if p in (np.inf, math.inf, "inf"):
        return float(np.abs(flat).max())
    raise ArgumentError(f"unsupported norm order {p!r}")


def backbone_norms(model: RCFModel, p) -> list[NormEntry]:
    """Per-conv operator norms at the configured input extents."""
    cfg = model.cfg
    entries = []
    h, w = cfg.image_h, cfg.image_w
    c_in = 3
    for name, weight, stride, pad in model.backbone.conv_weights():
        entries.append(NormEntry(name, "conv", conv_operator_norm(weight.data, (c_in, h, w), stride, pad, p)))
        c_in = weight.shape[0]
        h, w = h // stride, w // stride
    return entries


def backbone_pair_ratio(model: RCFModel, x: np.ndarray, y: np.ndarray, p) -> float:
    """Empirical ||f(x)-f(y)||_p / ||x-y||_p through the conv+ReLU backbone
    (norm layers bypassed so every nonlinearity is 1-Lipschitz)."""
    with no_grad():
        fx = model.backbone(Tensor(x), apply_norm=False).f.data
        fy = model.backbone(Tensor(y), apply_norm=False).f.data
    denom = _flat_norm(x - y, p)
    if denom == 0:
        return 0.0
    return _flat_norm(fx - fy, p) / denom


def _attention_local_ratio(fn, shape: tuple, p, trials: int = 20, scale: float = 1e-3) -> float:
    rng = np.random.default_rng(1234)
    worst = 0.0
    with no_grad():
        for _ in range(trials):
            x = rng.standard_normal(shape)
            dx = rng.standard_normal(shape) * scale
            fx = fn(Tensor(x))
            fy = fn(Tensor(x + dx))
            worst = max(worst, _flat_norm(fy.data - fx.data, p) / _flat_norm(dx, p))
    return worst


def lipschitz_bound(model: RCFModel, p) -> LipschitzReport:
    """Per-layer norms, products for the feed-forward subnetworks, and
    empirical local ratios for the attention stacks (globally unbounded)."""
    report = LipschitzReport(p=p)
    cfg = model.cfg

    bb = backbone_norms(model, p)
    report.entries.extend(bb)
    report.products["backbone"] = float(np.prod([e.norm for e in bb]))

    fh, fw = cfg.feature_hw
    dec = model.mask_decoder
    c_skip1, c_skip2 = model.backbone.skip_channels
    dec_plan = [
        (dec.lat1, (cfg.token_dim, fh * 2, fw * 2)),
        (dec.ref1, (c_skip2, fh * 2, fw * 2)),
        (dec.lat2, (c_skip2, fh * 4, fw * 4)),
        (dec.ref2, (c_skip1, fh * 4, fw * 4)),
        (dec.out, (c_skip1, fh * 4, fw * 4)),
    ]
    dec_entries = []
    for conv, in_shape in dec_plan:
        norm = conv_operator_norm(conv.w.data, in_shape, conv.stride, conv.pad, p)
        dec_entries.append(NormEntry(f"mask_decoder.{conv.name}", "conv", norm))
    report.entries.extend(dec_entries)
    report.products["mask_decoder"] = float(np.prod([e.norm for e in dec_entries]))

    # linear chains in the instance head (operator norms act on x @ W, i.e. W^T)
    fc_entries = [
        NormEntry("head.theta_fc1", "linear", operator_norm(model.head.theta_fc1.w.data.T, p)),
        NormEntry("head.theta_fc2", "linear", operator_norm(model.head.theta_fc2.w.data.T, p)),
    ]
    report.entries.extend(fc_entries)
    report.products["mask_filter_mlp"] = float(np.prod([e.norm for e in fc_entries]))
    class_entry = NormEntry("head.class_head", "linear", operator_norm(model.head.class_head.w.data.T, p))
    report.entries.append(class_entry)
    report.products["class_head"] = class_entry.norm

    layout_len = fh * fw + (cfg.ref_token_k**2 if cfg.ref_frames else 0) + (
        (1 + cfg.ref_frames) if cfg.audio_enabled else 0
    )
    report.entries.append(NormEntry("encoder", "attention", None, "unbounded globally; local ratio reported"))

    def run_encoder(x: Tensor) -> Tensor:
        for layer in model.encoder.layers:
            x, _ = layer(x)
        return x

    report.attention_ratios["encoder"] = _attention_local_ratio(run_encoder, (layout_len, cfg.token_dim), p)

    report.entries.append(NormEntry("head.decoder", "attention", None, "unbounded globally; local ratio reported"))

    def run_decoder(mem: Tensor) -> Tensor:
        q = model.head.query
        for layer in model.head.layers:
            q, _ = layer(q, mem)
        return q

    report.attention_ratios["head.decoder"] = _attention_local_ratio(
        run_decoder, (layout_len, cfg.token_dim), p
    )
    return report


# ---------------------------------------------------------------------------
# order-stability probe


@dataclass
class ProbeRow:
    t: int  # transition into frame t
    eps: float  # input discrepancy
    delta: float  # output discrepancy
    ratio: float
    tracked: int  # gt instances followed across the transition
    switched: int  # of those, how many changed identity
    changed: bool


@dataclass
class ProbeReport:
    rows: list[ProbeRow]
    switch_rate: float
    trained: bool
    norm_p: object
    median_unchanged_ratio: float
    median_changed_ratio: float

    def changed_rows(self) -> list[ProbeRow]:
        return [r for r in self.rows if r.changed]


def _probe_norm_order(p):
    if p in (1, "1"):
        return 1
    if p in (2, "2"):
        return 2
    if p in (np.inf, math.inf, "inf"):
        return np.inf
    raise ArgumentError(f"unsupported probe norm {p!r}")


def order_stability_probe(
    model: RCFModel,
    clip: SpriteClip,
    iou_override: bool | None = None,
    p=1,
    match_iou: float = 0.3,
    trained: bool = True,
) -> ProbeReport:
    """Per consecutive frame pair: input/output discrepancy and identity events.

    The output vector concatenates class probabilities and sigmoid masks over
    all slots.  A switch is a ground-truth instance whose matched fired slot
    carries a different identity than on the previous frame.
    """
    if clip.num_frames < 2:
        raise ArgumentError("probe needs at least 2 frames")
    p = _probe_norm_order(p)
    cfg = model.cfg
    cache = RefCache(capacity=cfg.ref_frames)
    state = TrackState(num_slots=cfg.num_slots)
    outputs = []
    per_frame_ids = []
    per_frame_match = []  # gt index -> identity at that frame (or None)
    for t in range(clip.num_frames):
        window = clip.audio_window(t).astype(np.float64) if cfg.audio_enabled else None
        pred = infer_frame(
            model, clip.frames[t].astype(np.float64), window, cache, state, t, iou_override=iou_override
        )
        soft = sigmoid(pred.mask_logits)
        outputs.append(np.concatenate([pred.class_probs.ravel(), soft.ravel()]))
        per_frame_ids.append(pred.identities.copy())

        match: dict[int, int] = {}
        for g in range(clip.num_instances):
            if not clip.visibility[t, g]:
                continue
            gt_small = shrink_mask(clip.gt_masks[t, g], cfg.mask_hw)
            best_iou, best_slot = 0.0, -1
            for i in range(cfg.num_slots):
                if not pred.fired[i]:
                    continue
                iou = mask_iou(pred.binary_masks[i], gt_small)
                if iou > best_iou:
                    best_iou, best_slot = iou, i
            if best_slot >= 0 and best_iou >= match_iou:
                match[g] = int(pred.identities[best_slot])
        per_frame_match.append(match)

    rows = []
    total_tracked = 0
    total_switched = 0
    for t in range(1, clip.num_frames):
        eps = _flat_norm(
            clip.frames[t].astype(np.float64) - clip.frames[t - 1].astype(np.float64), p
        )
        delta = _flat_norm(outputs[t] - outputs[t - 1], p)
        if eps == 0.0:
            ratio = 0.0 if delta < 1e-12 else math.inf
        else:
            ratio = delta / eps
        tracked = 0
        switched = 0
        for g, ident in per_frame_match[t].items():
            prev = per_frame_match[t - 1].get(g)
            if prev is None:
                continue
            tracked += 1
            if prev != ident:
                switched += 1
        total_tracked += tracked
        total_switched += switched
        rows.append(ProbeRow(t, eps, delta, ratio, tracked, switched, changed=switched > 0))

    unchanged = [r.ratio for r in rows if not r.changed and math.isfinite(r.ratio)]
    changed = [r.ratio for r in rows if r.changed and math.isfinite(r.ratio)]
    return ProbeReport(
        rows=rows,
        switch_rate=total_switched / total_tracked if total_tracked else 0.0,
        trained=trained,
        norm_p=p,
        median_unchanged_ratio=float(np.median(unchanged)) if unchanged else 0.0,
        median_changed_ratio=float(np.median(changed)) if changed else 0.0,
    )


def hard_cut_clip(a: SpriteClip, b: SpriteClip) -> SpriteClip:
    """Concatenate two clips into one with a hard cut at the seam."""
    if a.frames.shape[1:] != b.frames.shape[1:]:
        raise ArgumentError("clips must share image extents")
    ga, gb = a.num_instances, b.num_instances
    t_a = a.num_frames
    masks = np.zeros((t_a + b.num_frames, ga + gb, *a.gt_masks.shape[2:]), dtype=np.uint8)
    masks[:t_a, :ga] = a.gt_masks
    masks[t_a:, ga:] = b.gt_masks
    vis = np.zeros((t_a + b.num_frames, ga + gb), dtype=bool)
    vis[:t_a, :ga] = a.visibility
    vis[t_a:, ga:] = b.visibility
    return replace(
        a,
        frames=np.concatenate([a.frames, b.frames]),
        gt_masks=masks,
        gt_classes=np.concatenate([a.gt_classes, b.gt_classes]),
        gt_identities=np.concatenate([a.gt_identities, b.gt_identities + ga]).astype(np.uint32),
        visibility=vis,
        waveform=np.concatenate([a.waveform, b.waveform]),
        clip_id=f"{a.clip_id}+{b.clip_id}",
    )
