"""Set-based supervision and the training loop.

Per frame: Hungarian-match ground truths to slots on the similarity matrix,
then minimize cross-entropy over all slots (unmatched slots are pushed to
the no-object class) plus Dice loss on the matched masks.  AdamW with the
poly LR schedule; reference features are recomputed with current weights
each iteration (no cache during training).
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .config import RunConfig
from .container import read_container, write_container
from .errors import ArgumentError, FormatError, NumericError
from .matching import Assignment, hungarian_assign, shrink_mask, similarity_matrix
from .model import ModelOutput, RCFModel
from .optim import OptimState, adamw_step, poly_lr
from .synthav import SpriteClip, read_clip
from .tensor import Tensor


@dataclass
class LossReport:
    loss: Tensor  # scalar, differentiable
    total: float
    ce: float
    dice: float
    assignment: Assignment
    iteration: int = 0


def set_loss(
    class_probs: Tensor,
    mask_logits: Tensor,
    gt_classes: np.ndarray,
    gt_masks: np.ndarray,
    assignment: Assignment,
    num_classes: int,
    iteration: int = 0,
) -> LossReport:
    """Cross-entropy over every slot plus Dice loss on matched masks.

    `gt_masks` must already live on the prediction grid.  Mask loss applies
    only where the assigned ground-truth class is a real object.
    """
    n, n_cols = class_probs.shape
    if n_cols != num_classes + 1:
        raise ArgumentError(f"class head emits {n_cols} columns, expected {num_classes + 1}")
    g = len(assignment)
    if g != len(gt_classes):
        raise ArgumentError("assignment length disagrees with ground-truth count")
    if any(j >= n for j in assignment.gt_to_slot):
        raise ArgumentError("assignment references a slot outside the prediction")

    onehot = np.zeros((n, num_classes + 1))
    onehot[:, num_classes] = 1.0  # default target: no-object
    for i, j in enumerate(assignment.gt_to_slot):
        onehot[j] = 0.0
        onehot[j, int(gt_classes[i])] = 1.0
    ce = -(class_probs.log() * Tensor(onehot)).sum()

    dice_terms = []
    for i, j in enumerate(assignment.gt_to_slot):
        gt = np.asarray(gt_masks[i], dtype=np.float64)
        if gt.shape != tuple(mask_logits.shape[1:]):
            raise ArgumentError(f"gt mask {gt.shape} mismatches prediction grid {mask_logits.shape[1:]}")
        m = mask_logits[j].sigmoid()
        inter = (m * Tensor(gt)).sum()
        d = (inter * 2.0 + 1.0) / (m.sum() + float(gt.sum()) + 1.0)
        dice_terms.append(1.0 - d)
    dice = dice_terms[0] if dice_terms else Tensor(np.zeros(()))
    for t in dice_terms[1:]:
        dice = dice + t

    loss = ce + dice
    return LossReport(
        loss=loss,
        total=float(loss.data),
        ce=float(ce.data),
        dice=float(dice.data),
        assignment=assignment,
        iteration=iteration,
    )


def frame_ground_truth(clip: SpriteClip, t: int, mask_hw: tuple[int, int]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Visible instances at frame t: (indices, classes, masks on mask_hw grid)."""
    idx = np.flatnonzero(clip.visibility[t])
    classes = clip.gt_classes[idx]
    masks = np.stack([shrink_mask(clip.gt_masks[t, g], mask_hw) for g in idx]) if idx.size else np.zeros(
        (0, *mask_hw), dtype=bool
    )
    return idx, classes, masks


def match_and_loss(output: ModelOutput, clip: SpriteClip, t: int, cfg: RunConfig, iteration: int = 0) -> LossReport:
    _, classes, masks = frame_ground_truth(clip, t, cfg.mask_hw)
    pred = output.to_prediction(frame_index=t)
    sim = similarity_matrix(pred, masks.astype(np.float64), classes, dice_mode=cfg.sim_dice)
    assignment = hungarian_assign(sim)
    return set_loss(
        output.class_probs, output.mask_logits, classes, masks, assignment, cfg.num_classes, iteration
    )


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str | Path, model: RCFModel, state: OptimState, iteration: int) -> None:
    blocks: dict[str, np.ndarray] = {}
    for name, p in model.params().items():
        blocks[f"param/{name}"] = p.data.astype("<f8")
        blocks[f"optim_m/{name}"] = state.m[name].astype("<f8")
        blocks[f"optim_v/{name}"] = state.v[name].astype("<f8")
    meta = {
        "kind": "checkpoint",
        "iteration": iteration,
        "optim_step": state.step,
        "config": model.cfg.to_dict(),
    }
    write_container(path, meta, blocks)


def load_checkpoint(path: str | Path) -> tuple[RCFModel, OptimState, int]:
    meta, blocks = read_container(path)
    if meta.get("kind") != "checkpoint":
        raise FormatError(f"container at {path} is not a checkpoint (kind={meta.get('kind')!r})")
    cfg = RunConfig(**meta["config"])
    model = RCFModel(cfg)
    params = model.params()
    state = OptimState.create(params, cfg.lr0, model.param_groups())
    state.step = int(meta["optim_step"])
    for name, p in params.items():
        key = f"param/{name}"
        if key not in blocks:
            raise FormatError(f"checkpoint missing parameter block {key!r}")
        if blocks[key].shape != p.data.shape:
            raise FormatError(f"checkpoint block {key!r} has shape {blocks[key].shape}, expected {p.data.shape}")
        p.data = blocks[key].astype(np.float64)
        state.m[name] = blocks[f"optim_m/{name}"].astype(np.float64)
        state.v[name] = blocks[f"optim_v/{name}"].astype(np.float64)
    return model, state, int(meta["iteration"])


# ---------------------------------------------------------------------------
# training loop


def list_clip_dirs(split_dir: str | Path) -> list[Path]:
    split_dir = Path(split_dir)
    if not split_dir.is_dir():
        raise FormatError(f"dataset split directory not found: {split_dir}")
    return sorted(p for p in split_dir.iterdir() if (p / "manifest.json").is_file())


@dataclass
class TrainResult:
    iterations: int
    metrics_path: Path
    final_checkpoint: Path
    losses: list[float]


def sample_window(clip: SpriteClip, t: int, delta: int) -> tuple[list[np.ndarray], list[np.ndarray]]:
    """Reference frames t-delta..t-1 (frame 0 replicated at the clip start)
    and audio windows t-delta..t."""
    refs = [clip.frames[max(t - k, 0)].astype(np.float64) for k in range(delta, 0, -1)]
    windows = [clip.audio_window(max(t - k, 0)).astype(np.float64) for k in range(delta, -1, -1)]
    return refs, windows


def train_loop(cfg: RunConfig, data_dir: str | Path, out_dir: str | Path, log_every: int = 50) -> TrainResult:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    clip_dirs = list_clip_dirs(Path(data_dir) / "train")[: cfg.train_clips]
    if not clip_dirs:
        raise FormatError(f"no training clips under {data_dir}")
    clips = [read_clip(p) for p in clip_dirs]

    model = RCFModel(cfg)
    params = model.params()
    state = OptimState.create(params, cfg.lr0, model.param_groups())
    rng = np.random.default_rng([cfg.seed & 0xFFFFFFFF, zlib.crc32(b"train_loop")])

    metrics_path = out_dir / "metrics.csv"
    losses: list[float] = []
    with open(metrics_path, "w") as mf:
        mf.write("iteration,lr,total,ce,dice\n")
        for it in range(cfg.iter_max):
            lr = poly_lr(it, cfg.iter_max, cfg.lr0)
            clip = clips[int(rng.integers(len(clips)))]
            t = int(rng.integers(clip.num_frames))
            refs, windows = sample_window(clip, t, cfg.ref_frames)
            output = model.forward_frames(
                clip.frames[t].astype(np.float64),
                refs,
                windows if cfg.audio_enabled else None,
                frame_index=t,
            )
            report = match_and_loss(output, clip, t, cfg, iteration=it)
            if not np.isfinite(report.total):
                dump = {
                    "iteration": it,
                    "lr": lr,
                    "total": report.total,
                    "ce": report.ce,
                    "dice": report.dice,
                    "clip_seed": clip.seed,
                    "frame": t,
                }
                (out_dir / "abort_dump.json").write_text(json.dumps(dump, indent=1))
                raise NumericError(f"non-finite loss at iteration {it}; diagnostics in abort_dump.json")
            report.loss.backward()
            grads = {name: p.grad for name, p in params.items()}
            adamw_step(state, params, grads, lr)
            model.zero_grads()
            losses.append(report.total)
            mf.write(f"{it},{lr!r},{report.total!r},{report.ce!r},{report.dice!r}\n")
            if (it + 1) % cfg.ckpt_every == 0:
                save_checkpoint(out_dir / f"ckpt_{it + 1:06d}", model, state, it + 1)
            if log_every and (it % log_every == 0):
                recent = np.mean(losses[-log_every:])
                print(f"iter {it:6d}  lr {lr:.3e}  loss {recent:.4f}", flush=True)

    final = out_dir / "ckpt_final"
    save_checkpoint(final, model, state, cfg.iter_max)
    return TrainResult(iterations=cfg.iter_max, metrics_path=metrics_path, final_checkpoint=final, losses=losses)
