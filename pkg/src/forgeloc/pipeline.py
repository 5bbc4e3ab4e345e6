"""Run drivers: training, evaluation, ablation table, robustness curves,
and checkpoint round-tripping. Every run directory gets a verbatim config
snapshot, a JSONL training log with all loss components per step, and the
checkpoints needed to reproduce or continue the run."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from torch.optim.lr_scheduler import CosineAnnealingLR

from . import datagen
from .config import TrainConfig
from .metrics import ScoreReport, score_images
from .model import TamperModel
from .objectives import (
    LossBundle,
    _scalar,
    auxiliary_loss,
    localization_loss,
    minimality_loss,
    sufficiency_loss,
    total_loss,
)
from .reasoning import inject_mask_noise

log = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    """Raised when a loss goes non-finite; diagnostics land in the run dir."""


def build_model(cfg: TrainConfig) -> TamperModel:
    torch.manual_seed(cfg.seed)
    return TamperModel(depth=cfg.depth,
                       blocks_per_scale=cfg.blocks_per_scale,
                       base_channels=cfg.base_channels,
                       reasoning_depth=cfg.reasoning_depth)


def _augment(img: np.ndarray, mask: np.ndarray, rng) -> tuple:
    """Random dihedral transform applied identically to image and mask."""
    k = int(rng.integers(0, 4))
    if k:
        img = np.rot90(img, k, axes=(0, 1))
        mask = np.rot90(mask, k)
    if rng.random() < 0.5:
        img = img[:, ::-1]
        mask = mask[:, ::-1]
    return img, mask


def _to_batch(images: np.ndarray, masks: np.ndarray, idx,
              aug_rng=None) -> tuple:
    imgs = [images[i] for i in idx]
    ms = [masks[i] for i in idx]
    if aug_rng is not None:
        pairs = [_augment(im, mk, aug_rng) for im, mk in zip(imgs, ms)]
        imgs = [p[0] for p in pairs]
        ms = [p[1] for p in pairs]
    x_np = np.ascontiguousarray(
        np.stack(imgs).transpose(0, 3, 1, 2), dtype=np.float32)
    m_np = np.ascontiguousarray(np.stack(ms), dtype=np.float32)
    return torch.from_numpy(x_np), torch.from_numpy(m_np), ms


def save_checkpoint(path, model, optimizer, cfg: TrainConfig, epoch: int,
                    step: int, rng_states: dict) -> None:
    payload = {
        "model": model.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "config": asdict(cfg),
        "epoch": epoch,
        "step": step,
        "gamma_phi": float(model.fusion.gamma.detach()),
        "torch_rng": torch.get_rng_state(),
        "extra_rng": rng_states,
    }
    torch.save(payload, path)


def load_checkpoint(path) -> dict:
    return torch.load(path, map_location="cpu", weights_only=False)


def restore_model(ckpt: dict) -> tuple[TamperModel, TrainConfig]:
    cfg = TrainConfig(**ckpt["config"])
    model = TamperModel(depth=cfg.depth,
                        blocks_per_scale=cfg.blocks_per_scale,
                        base_channels=cfg.base_channels,
                        reasoning_depth=cfg.reasoning_depth)
    model.load_state_dict(ckpt["model"])
    model.eval()
    return model, cfg


def train(cfg: TrainConfig, dataset_root, out_dir) -> Path:
    """Full optimization run; returns the path of the final checkpoint."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.snapshot").write_text(cfg.to_snapshot())

    records = datagen.read_manifest(dataset_root)
    datagen.check_split_hygiene(records)
    ids, images, masks = datagen.load_split(dataset_root, "train")
    n = len(ids)

    model = build_model(cfg)
    model.train()
    optimizer = torch.optim.AdamW(model.parameters(), lr=cfg.lr,
                                  weight_decay=cfg.weight_decay)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    planned_steps = cfg.epochs * steps_per_epoch
    if cfg.max_steps:
        planned_steps = min(planned_steps, cfg.max_steps)
    scheduler = CosineAnnealingLR(optimizer, T_max=planned_steps)

    data_rng = np.random.default_rng(cfg.seed)
    noise_rng = np.random.default_rng(cfg.seed + 1)
    aug_rng = np.random.default_rng(cfg.seed + 2) if cfg.augment else None
    need_loo = cfg.lambda_su > 0
    need_mi = cfg.lambda_mi > 0
    need_aux = cfg.lambda_aux > 0
    need_mask_branch = need_mi or need_aux
    zero = torch.zeros(())

    step = 0
    epoch = 0
    log_fh = open(out_dir / "train.log.jsonl", "w")
    try:
        for epoch in range(cfg.epochs):
            perm = data_rng.permutation(n)
            for start in range(0, n, cfg.batch_size):
                idx = perm[start:start + cfg.batch_size]
                batch_ids = [ids[i] for i in idx]
                x, m, batch_masks = _to_batch(images, masks, idx, aug_rng)

                noisy = None
                noise_seed = int(noise_rng.integers(2 ** 31))
                if need_mask_branch:
                    noisy_np = np.stack([
                        inject_mask_noise(mask_np, cfg.mask_noise_gamma,
                                          noise_seed + k,
                                          cfg.noise_within_mask)
                        for k, mask_np in enumerate(batch_masks)
                    ]).astype(np.float32)
                    noisy = torch.from_numpy(noisy_np)

                out = model.training_forward(x, noisy, need_loo,
                                             need_mask_branch)
                eps = cfg.prob_clamp_eps
                loc = localization_loss(out["pred"].squeeze(1), m, eps)
                su = (sufficiency_loss(out["p_full"], out["p_loo"], eps,
                                       cfg.su_aggregate, cfg.detach_loo)
                      if need_loo else zero)
                mi = (minimality_loss(out["z"], out["mask_embedding"],
                                      cfg.mi_kl_mode, eps)
                      if need_mi else zero)
                aux = (auxiliary_loss(out["aux_pred"].squeeze(1), m, eps)
                       if need_aux else zero)
                bundle = LossBundle(loc=loc, su=su, mi=mi, aux=aux,
                                    lambdas=cfg.lambdas)
                total = total_loss(bundle)

                if not torch.isfinite(total):
                    diag = {"step": step, "epoch": epoch,
                            "batch_ids": batch_ids,
                            "losses": {k: _scalar(getattr(bundle, k))
                                       for k in ("loc", "su", "mi", "aux")},
                            "total": _scalar(total)}
                    (out_dir / "diagnostic.json").write_text(
                        json.dumps(diag, indent=2))
                    raise TrainingDivergedError(
                        f"non-finite loss at step {step}; see "
                        f"{out_dir / 'diagnostic.json'}")

                optimizer.zero_grad()
                total.backward()
                optimizer.step()
                model.fusion.project_()
                scheduler.step()

                rec = bundle.to_record()
                rec.update(step=step, epoch=epoch,
                           gamma_phi=float(model.fusion.gamma.detach()),
                           lr=scheduler.get_last_lr()[0],
                           noise_seed=noise_seed,
                           batch_ids=batch_ids)
                log_fh.write(json.dumps(rec) + "\n")
                step += 1
                if cfg.max_steps and step >= cfg.max_steps:
                    break
            else:
                if (epoch + 1) % cfg.checkpoint_every == 0:
                    save_checkpoint(out_dir / f"ckpt_epoch_{epoch:04d}.pt",
                                    model, optimizer, cfg, epoch, step,
                                    _rng_states(data_rng, noise_rng))
                log.info("epoch %d/%d done (%d steps)", epoch + 1,
                         cfg.epochs, step)
                continue
            break
    finally:
        log_fh.close()

    final = out_dir / "ckpt_final.pt"
    save_checkpoint(final, model, optimizer, cfg, epoch, step,
                    _rng_states(data_rng, noise_rng))
    return final


def _rng_states(data_rng, noise_rng) -> dict:
    return {"data": data_rng.bit_generator.state,
            "noise": noise_rng.bit_generator.state}


def predict_probability_maps(model: TamperModel, images: np.ndarray,
                             batch_size: int = 16) -> list[np.ndarray]:
    """Deterministic inference over (N,H,W,3) float images; the mask-noise
    branch plays no part here."""
    model.eval()
    preds = []
    with torch.no_grad():
        for start in range(0, len(images), batch_size):
            chunk = images[start:start + batch_size]
            x = torch.from_numpy(chunk.transpose(0, 3, 1, 2).copy())
            p = model(x).squeeze(1).numpy()
            preds.extend(np.asarray(pi) for pi in p)
    return preds


def evaluate(ckpt_path, dataset_root, split: str = "test",
             threshold: float | None = None, out_dir=None,
             pooled: bool = False, distort=None) -> ScoreReport:
    """Score a checkpoint on one split; optionally distort images first
    (masks untouched). Writes scores, summary, and predicted masks."""
    ckpt = load_checkpoint(ckpt_path)
    model, cfg = restore_model(ckpt)
    if threshold is None:
        threshold = cfg.threshold
    ids, images, masks = datagen.load_split(dataset_root, split)
    if distort is not None:
        images = np.stack([distort(img) for img in images])
    preds = predict_probability_maps(model, images)
    report = score_images(ids, preds, masks, threshold=threshold,
                          pooled=pooled)
    if out_dir is not None:
        out_dir = Path(out_dir)
        report.write(out_dir)
        mask_dir = out_dir / "pred_masks"
        mask_dir.mkdir(parents=True, exist_ok=True)
        for sample_id, p in zip(ids, preds):
            arr = np.round(np.clip(p, 0, 1) * 255.0).astype(np.uint8)
            Image.fromarray(arr).save(mask_dir / f"{sample_id}.png")
    return report


ABLATION_VARIANTS = (
    ("1", "drop_su", {"lambda_su": 0.0}),
    ("2", "drop_mi", {"lambda_mi": 0.0}),
    ("3", "drop_aux", {"lambda_aux": 0.0}),
    ("4", "full", {}),
)


def ablate(cfg: TrainConfig, dataset_root, out_dir,
           split: str = "test") -> list[dict]:
    """Train the four loss configurations with shared seeds and data and
    score each on the held-out split."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    for variant_id, name, patch in ABLATION_VARIANTS:
        variant_cfg = TrainConfig(**{**asdict(cfg), **patch})
        run_dir = out_dir / f"ablation_{variant_id}_{name}"
        log.info("ablation %s (%s)", variant_id, name)
        ckpt = train(variant_cfg, dataset_root, run_dir)
        rep = evaluate(ckpt, dataset_root, split=split,
                       out_dir=run_dir / "eval")
        rows.append({
            "id": variant_id,
            "su": variant_cfg.lambda_su > 0,
            "mi": variant_cfg.lambda_mi > 0,
            "aux": variant_cfg.lambda_aux > 0,
            "f1": rep.f1,
            "auc": rep.auc,
        })
    with open(out_dir / "ablation.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    (out_dir / "ablation.json").write_text(json.dumps(rows, indent=2))
    return rows


def _plot_curve(levels, aucs, title, xlabel, path):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(range(len(levels)), aucs, marker="o")
    ax.set_xticks(range(len(levels)))
    ax.set_xticklabels([str(v) for v in levels])
    ax.set_xlabel(xlabel)
    ax.set_ylabel("AUC")
    ax.set_title(title)
    ax.grid(alpha=0.3)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def robustness(ckpt_path, dataset_root, out_dir,
               jpeg_qualities=(90, 70, 50), blur_kernels=(3, 5, 7),
               split: str = "test") -> dict:
    """AUC versus distortion severity; one CSV and one plot per family.
    The undistorted level is always included as the baseline row."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    base = evaluate(ckpt_path, dataset_root, split=split)
    curves: dict = {}

    families = (
        ("jpeg", "JPEG quality", jpeg_qualities,
         lambda q: (lambda img: datagen.apply_jpeg(img, q))),
        ("blur", "Gaussian blur kernel", blur_kernels,
         lambda k: (lambda img: datagen.apply_gaussian_blur(img, k))),
    )
    for name, xlabel, levels, make_distort in families:
        rows = [{"level": "none", "f1": base.f1, "auc": base.auc}]
        for level in levels:
            rep = evaluate(ckpt_path, dataset_root, split=split,
                           distort=make_distort(level))
            rows.append({"level": level, "f1": rep.f1, "auc": rep.auc})
            log.info("robustness %s=%s auc=%.4f", name, level, rep.auc)
        with open(out_dir / f"robustness_{name}.csv", "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=["level", "f1", "auc"])
            writer.writeheader()
            writer.writerows(rows)
        _plot_curve([r["level"] for r in rows], [r["auc"] for r in rows],
                    f"Robustness: {name}", xlabel,
                    out_dir / f"robustness_{name}.png")
        curves[name] = rows
    (out_dir / "robustness.json").write_text(json.dumps(curves, indent=2))
    return curves
