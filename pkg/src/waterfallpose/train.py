"""Deterministic training loop with per-epoch metrics and checkpointing.

Each step runs backbone -> waterfall neck -> head, masked MSE against
Gaussian targets, and an AdamW update under a step-decay schedule. A fixed
seed fixes the synthetic data, the parameter init, and the batch order, so
the metrics log and the final checkpoint are reproducible.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .autodiff import DTYPES, Tensor, backward, no_grad, rng_from_seed
from .checkpoint import save_checkpoint
from .config import RunConfig, to_dict
from .errors import ConfigurationError, NumericError
from .evaluate import (COCO_FLIP_PAIRS, KeypointAnnotation, OKSParams,
                       PredictedInstance, average_precision, oks)
from .head import STRIDE, decode_keypoints, gaussian_targets, mse_loss_visible
from .model import PoseModel
from .optim import AdamW, step_decay_lr
from .synth import load_dataset, synth_generate


@dataclass
class TrainResult:
    final_ckpt: Path
    best_ckpt: Path
    metrics_path: Path
    metrics: List[dict]
    final_eval_oks: float
    steps: int


def _prepare_dataset(cfg: RunConfig, out_dir: Path):
    data = cfg.data
    if data.dataset_dir:
        dataset_dir = Path(data.dataset_dir)
    elif data.synth is not None:
        dataset_dir = out_dir / "data"
        if not (dataset_dir / "annotations.json").exists():
            synth_generate(data.synth, dataset_dir)
    else:
        raise ConfigurationError("data section needs dataset_dir or a synth spec")
    images, anns, meta = load_dataset(dataset_dir)
    if meta.get("untrainable"):
        raise ConfigurationError(
            f"dataset {dataset_dir} is flagged untrainable (no visible joints)")
    for img, ann in zip(images, anns):
        if (img.shape[1], img.shape[2]) != tuple(cfg.data.input_hw):
            raise ConfigurationError(
                f"image {ann.file_name} is {img.shape[1]}x{img.shape[2]}, "
                f"config expects {cfg.data.input_hw}")
    return images, anns


def _flip_sample(img: np.ndarray, target: np.ndarray, mask: np.ndarray):
    """Horizontal flip of image and heatmap targets, swapping left/right joints."""
    img = img[:, :, ::-1].copy()
    target = target[:, :, ::-1].copy()
    mask = mask.copy()
    for a, b in COCO_FLIP_PAIRS:
        target[[a, b]] = target[[b, a]]
        mask[[a, b]] = mask[[b, a]]
    return img, target, mask


def evaluate_split(model: PoseModel, images: Sequence[np.ndarray],
                   anns: Sequence[KeypointAnnotation], dtype,
                   with_ap: bool = False) -> Dict[str, float]:
    """Mean OKS (and optionally AP/AR) over a split, image-id ascending."""
    order = sorted(range(len(anns)), key=lambda i: anns[i].image_id)
    scores = []
    occluded_scores = []
    preds = []
    for i in order:
        with no_grad():
            maps = model.forward(Tensor(images[i][None].astype(dtype), _check=False))
        decoded = decode_keypoints(maps.data[0])
        scores.append(oks(decoded[:, :2], anns[i]))
        preds.append(PredictedInstance(image_id=anns[i].image_id,
                                       keypoints=decoded[:, :2],
                                       score=float(decoded[:, 2].mean())))
        occ = occluded_oks(decoded, anns[i])
        if occ is not None:
            occluded_scores.append(occ)
    result = {"mean_oks": float(np.mean(scores))}
    if occluded_scores:
        result["mean_oks_occluded"] = float(np.mean(occluded_scores))
    if with_ap:
        result.update(average_precision(preds, list(anns), OKSParams()))
    return result


def occluded_oks(decoded: np.ndarray, ann: KeypointAnnotation) -> Optional[float]:
    """OKS restricted to occluded joints whose true positions were recorded."""
    kp = ann.keypoints
    occ = (kp[:, 2] == 0) & ((kp[:, 0] != 0) | (kp[:, 1] != 0))
    if not occ.any():
        return None
    from .evaluate import COCO_SIGMAS
    d2 = ((decoded[occ, :2] - kp[occ, :2]) ** 2).sum(axis=1)
    return float(np.exp(-d2 / (2.0 * ann.area * COCO_SIGMAS[occ] ** 2)).mean())


def train(cfg: RunConfig, out_dir: Path | str, max_steps: Optional[int] = None,
          log=print) -> TrainResult:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dtype = DTYPES[cfg.precision]
    images, anns = _prepare_dataset(cfg, out_dir)

    # held-out split by seeded permutation; empty holdout evaluates on train
    split_rng = rng_from_seed(cfg.seed, stream=2)
    perm = split_rng.permutation(len(images))
    n_hold = int(round(cfg.data.holdout_fraction * len(images)))
    hold_idx = sorted(perm[:n_hold].tolist())
    train_idx = sorted(perm[n_hold:].tolist())
    if not train_idx:
        raise ConfigurationError("empty training split")
    eval_idx = hold_idx if hold_idx else train_idx

    model = PoseModel(cfg.model.backbone, cfg.model.waterfall, cfg.model.num_joints,
                      cfg.data.input_hw, cfg.precision, cfg.seed)
    opt = AdamW(model.named_parameters(), lr=cfg.optim.lr, betas=cfg.optim.betas,
                eps=cfg.optim.eps, weight_decay=cfg.optim.weight_decay)

    out_h = cfg.data.input_hw[0] // STRIDE
    out_w = cfg.data.input_hw[1] // STRIDE
    targets = []
    masks = []
    for ann in anns:
        t, m = gaussian_targets(ann, out_h, out_w, cfg.model.target_sigma, dtype=dtype)
        targets.append(t)
        masks.append(m)

    batch_rng = rng_from_seed(cfg.seed, stream=3)
    metrics_path = out_dir / "metrics.txt"
    metrics: List[dict] = []
    best_oks = -1.0
    final_path = out_dir / "ckpt-final"
    best_path = out_dir / "ckpt-best"
    steps = 0
    t_start = time.time()

    def save(path: Path):
        arrays = {k: t.data for k, t in model.named_parameters().items()}
        save_checkpoint(path, arrays, to_dict(cfg), cfg.precision)

    with metrics_path.open("w") as mf:
        for epoch in range(cfg.optim.epochs):
            opt.lr = step_decay_lr(cfg.optim.lr, epoch, cfg.optim.decay_epochs)
            order = batch_rng.permutation(train_idx)
            flip_flags = (batch_rng.random(len(order)) < 0.5) if cfg.data.flip_augment \
                else np.zeros(len(order), dtype=bool)
            losses = []
            for start in range(0, len(order), cfg.optim.batch_size):
                if max_steps is not None and steps >= max_steps:
                    break
                idxs = order[start:start + cfg.optim.batch_size]
                imgs, tgts, msks = [], [], []
                for pos, i in enumerate(idxs):
                    im, tg, mk = images[i], targets[i], masks[i]
                    if flip_flags[start + pos]:
                        im, tg, mk = _flip_sample(im, tg, mk)
                    imgs.append(im)
                    tgts.append(tg)
                    msks.append(mk)
                batch = Tensor(np.stack(imgs).astype(dtype), _check=False)
                target = np.stack(tgts).astype(dtype)
                mask = np.stack(msks)
                try:
                    pred = model.forward(batch)
                    loss = mse_loss_visible(pred, target, mask)
                    loss_val = float(loss.data)
                    if not np.isfinite(loss_val):
                        raise NumericError("loss is non-finite")
                    model.zero_grad()
                    backward(loss)
                    opt.step()
                except NumericError as e:
                    raise NumericError(
                        f"aborting training at epoch {epoch} step {steps}: "
                        f"first non-finite tensor: {e}") from e
                losses.append(loss_val)
                steps += 1
            if not losses:
                break
            eval_res = evaluate_split(model, [images[i] for i in eval_idx],
                                      [anns[i] for i in eval_idx], dtype)
            record = {"epoch": epoch, "loss": float(np.mean(losses)),
                      "oks": eval_res["mean_oks"], "lr": opt.lr, "steps": steps}
            metrics.append(record)
            mf.write(f"epoch={epoch} loss={record['loss']!r} oks={record['oks']!r}\n")
            mf.flush()
            if record["oks"] > best_oks:
                best_oks = record["oks"]
                save(best_path)
            if epoch % 10 == 0 or epoch == cfg.optim.epochs - 1:
                log(f"epoch {epoch:4d}  loss {record['loss']:.6f}  "
                    f"oks {record['oks']:.4f}  lr {opt.lr:.2e}  "
                    f"steps {steps}  [{time.time() - t_start:.0f}s]")
            if max_steps is not None and steps >= max_steps:
                break
    save(final_path)
    final_eval = evaluate_split(model, [images[i] for i in eval_idx],
                                [anns[i] for i in eval_idx], dtype)
    return TrainResult(final_ckpt=final_path, best_ckpt=best_path,
                       metrics_path=metrics_path, metrics=metrics,
                       final_eval_oks=final_eval["mean_oks"], steps=steps)


def build_model_from_checkpoint(path: Path | str) -> Tuple[PoseModel, RunConfig]:
    from .checkpoint import load_checkpoint
    from .config import from_dict
    manifest, arrays = load_checkpoint(path)
    cfg = from_dict(manifest["config"])
    model = PoseModel(cfg.model.backbone, cfg.model.waterfall, cfg.model.num_joints,
                      cfg.data.input_hw, cfg.precision, cfg.seed)
    model.load_state(arrays)
    return model, cfg
