"""Comparison methods: transfer learning, multi-task learning, DANN-style
domain adaptation, the two-stage translate-then-predict pipeline, and the
classical augmentation baselines.

All trainers share the experiment driver's signature
``(cfg, source, target_train, run_seed) -> TrainOutputs`` so every method runs
under identical splits and reporting.
"""

from __future__ import annotations

import copy
import math
import random
from dataclasses import dataclass

import numpy as np
import scipy.ndimage
import torch
import torch.nn as nn
import torch.nn.functional as nnf

from .data import LabeledImage, ModalityDataset, PIXEL_MAX, PIXEL_MIN
from .engine import (
    TrainConfig,
    TrainOutputs,
    derive_seed,
    lr_at,
    single_epoch_batches,
    train_joint,
    train_predictor_on_batches,
    _require_finite,
)
from .networks import build_predictor
from .predictor import build_combined_training_view, dataset_to_tensors, predict
from .translator import translate


# ---------------------------------------------------------------------------
# Gradient reversal
# ---------------------------------------------------------------------------


class _ReverseGrad(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x: torch.Tensor, scale: float) -> torch.Tensor:
        ctx.scale = scale
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output: torch.Tensor):
        return grad_output.neg() * ctx.scale, None


class GradientReversal(nn.Module):
    """Identity in the forward pass; multiplies gradients by -scale backward."""

    def __init__(self, scale: float = 1.0):
        super().__init__()
        if scale <= 0:
            raise ValueError("scale must be positive")
        self.scale = scale

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return _ReverseGrad.apply(x, self.scale)


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentPolicy:
    """Which classical augmentation ops run, and with what ranges."""

    crop: bool = False
    crop_padding: int = 4
    flip: bool = False
    flip_prob: float = 0.5
    translation: bool = False
    translation_frac: float = 0.1
    rotation: bool = False
    rotation_deg: float = 10.0
    color_jitter: bool = False
    brightness: float = 0.1
    contrast: float = 0.1
    erase_prob: float = 0.0
    erase_area: tuple[float, float] = (0.02, 0.4)
    erase_aspect: tuple[float, float] = (0.3, 3.33)
    erase_fill: str = "random"

    def __post_init__(self) -> None:
        for p in (self.flip_prob, self.erase_prob):
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"probability {p} outside [0, 1]")
        lo, hi = self.erase_area
        if not (0.0 < lo <= hi < 1.0):
            raise ValueError(f"erase area range {self.erase_area} not inside (0, 1)")
        if self.erase_aspect[0] <= 0 or self.erase_aspect[0] > self.erase_aspect[1]:
            raise ValueError(f"bad erase aspect range {self.erase_aspect}")
        if self.erase_fill not in ("random", "zero"):
            raise ValueError(f"unknown erase fill mode {self.erase_fill!r}")
        if self.crop_padding < 0:
            raise ValueError("crop_padding must be >= 0")


SIMPLE_AUGMENT = AugmentPolicy(crop=True, flip=True, translation=True, rotation=True, color_jitter=True)
RANDOM_ERASING = AugmentPolicy(erase_prob=0.5)


def augment_simple(img: LabeledImage, policy: AugmentPolicy, rng: np.random.Generator) -> LabeledImage:
    """Crop / flip / translation / rotation / color jitter; label unchanged."""
    p = img.pixels
    h, w, _ = p.shape
    if policy.flip and rng.random() < policy.flip_prob:
        p = p[:, ::-1, :]
    if policy.crop and policy.crop_padding > 0:
        pad = policy.crop_padding
        padded = np.pad(p, ((pad, pad), (pad, pad), (0, 0)), mode="edge")
        dy = int(rng.integers(0, 2 * pad + 1))
        dx = int(rng.integers(0, 2 * pad + 1))
        p = padded[dy:dy + h, dx:dx + w, :]
    if policy.translation and policy.translation_frac > 0:
        my = int(round(policy.translation_frac * h))
        mx = int(round(policy.translation_frac * w))
        dy = int(rng.integers(-my, my + 1))
        dx = int(rng.integers(-mx, mx + 1))
        if dy or dx:
            p = scipy.ndimage.shift(p, (dy, dx, 0), order=1, mode="nearest")
    if policy.rotation and policy.rotation_deg > 0:
        angle = float(rng.uniform(-policy.rotation_deg, policy.rotation_deg))
        if angle != 0.0:
            p = scipy.ndimage.rotate(p, angle, axes=(1, 0), reshape=False, order=1, mode="nearest")
    if policy.color_jitter:
        scale = 1.0 + float(rng.uniform(-policy.contrast, policy.contrast))
        offset = float(rng.uniform(-policy.brightness, policy.brightness))
        mean = p.mean()
        p = (p - mean) * scale + mean + offset
    p = np.clip(p, PIXEL_MIN, PIXEL_MAX).astype(np.float32)
    return LabeledImage(np.ascontiguousarray(p), img.label, img.modality, img.source_id)


def augment_random_erasing(img: LabeledImage, policy: AugmentPolicy, rng: np.random.Generator) -> LabeledImage:
    """With probability ``erase_prob``, overwrite one rectangle with noise."""
    if rng.random() >= policy.erase_prob:
        return LabeledImage(img.pixels.copy(), img.label, img.modality, img.source_id)
    p = img.pixels.copy()
    h, w, c = p.shape
    lo, hi = policy.erase_area
    for _ in range(100):
        area = float(rng.uniform(lo, hi)) * h * w
        aspect = float(rng.uniform(*policy.erase_aspect))
        eh = int(round(math.sqrt(area * aspect)))
        ew = int(round(math.sqrt(area / aspect)))
        if eh < 1 or ew < 1 or eh > h or ew > w:
            continue
        if not lo <= (eh * ew) / (h * w) <= hi:
            continue  # rounding pushed the realized area outside the range
        y = int(rng.integers(0, h - eh + 1))
        x = int(rng.integers(0, w - ew + 1))
        if policy.erase_fill == "random":
            p[y:y + eh, x:x + ew, :] = rng.uniform(PIXEL_MIN, PIXEL_MAX, (eh, ew, c)).astype(np.float32)
        else:
            p[y:y + eh, x:x + ew, :] = 0.0
        break
    return LabeledImage(p, img.label, img.modality, img.source_id)


def _augmented_epoch_batches(
    data_imgs: torch.Tensor,
    data_labels: torch.Tensor,
    dataset: ModalityDataset,
    augment,  # LabeledImage, rng -> LabeledImage
    batch_size: int,
    seed: int,
    epoch: int,
):
    """Originals plus one freshly augmented copy of each, shuffled together."""
    rng = np.random.default_rng((seed, epoch))
    aug = np.stack([augment(img, rng).pixels for img in dataset])
    aug_imgs = torch.from_numpy(aug).permute(0, 3, 1, 2).contiguous()
    imgs = torch.cat([data_imgs, aug_imgs])
    labels = torch.cat([data_labels, data_labels])
    order = rng.permutation(imgs.shape[0])
    for start in range(0, imgs.shape[0], batch_size):
        sel = torch.from_numpy(order[start:start + batch_size])
        yield imgs[sel], labels[sel]


def _train_augmented(cfg: TrainConfig, target_train: ModalityDataset, run_seed: int, policy, op) -> TrainOutputs:
    torch.manual_seed(derive_seed(run_seed, "init"))
    pred_net = build_predictor(cfg.pred_arch, cfg.channels, base=cfg.pred_base, n_blocks=cfg.pred_blocks)
    data = dataset_to_tensors(target_train)
    data_seed = derive_seed(run_seed, "data")
    curves: list[dict[str, float]] = []
    train_predictor_on_batches(
        pred_net, cfg,
        lambda epoch: _augmented_epoch_batches(
            data[0], data[1], target_train, lambda im, rng: op(im, policy, rng),
            cfg.batch_size, data_seed, epoch,
        ),
        curves,
    )
    return TrainOutputs(pred_net, None, curves)


def train_simple_augment(cfg: TrainConfig, source, target_train: ModalityDataset, run_seed: int) -> TrainOutputs:
    """Target-only training with classical augmentations as extra data."""
    return _train_augmented(cfg, target_train, run_seed, SIMPLE_AUGMENT, augment_simple)


def train_random_erasing(cfg: TrainConfig, source, target_train: ModalityDataset, run_seed: int) -> TrainOutputs:
    """Target-only training with random-erasing copies as extra data."""
    return _train_augmented(cfg, target_train, run_seed, RANDOM_ERASING, augment_random_erasing)


# ---------------------------------------------------------------------------
# Transfer learning
# ---------------------------------------------------------------------------


def train_transfer(
    cfg: TrainConfig,
    source: ModalityDataset,
    target_train: ModalityDataset,
    run_seed: int,
    finetune_epochs: int | None = None,
) -> TrainOutputs:
    """Pretrain the predictor on source data, then finetune on target data.

    The finetune phase continues from the pretrained weights; snapshots of the
    phase boundary are kept in ``extras`` so the initialization contract is
    checkable.
    """
    if len(source) == 0 or len(target_train) == 0:
        raise ValueError("transfer learning needs nonempty source and target data")
    torch.manual_seed(derive_seed(run_seed, "init"))
    pred_net = build_predictor(cfg.pred_arch, cfg.channels, base=cfg.pred_base, n_blocks=cfg.pred_blocks)
    curves: list[dict[str, float]] = []

    src_data = dataset_to_tensors(source)
    src_seed = derive_seed(run_seed, "data:source")
    train_predictor_on_batches(
        pred_net, cfg,
        lambda epoch: single_epoch_batches(src_data, cfg.batch_size, src_seed, epoch),
        curves,
    )
    phase1_final = copy.deepcopy(pred_net.state_dict())

    phase2_init = copy.deepcopy(pred_net.state_dict())
    tgt_data = dataset_to_tensors(target_train)
    tgt_seed = derive_seed(run_seed, "data:target")
    n_finetune = cfg.total_epochs if finetune_epochs is None else finetune_epochs
    if n_finetune > 0:
        finetune_cfg = _with_epochs(cfg, n_finetune)
        train_predictor_on_batches(
            pred_net, finetune_cfg,
            lambda epoch: single_epoch_batches(tgt_data, cfg.batch_size, tgt_seed, epoch),
            curves,
        )
    return TrainOutputs(
        pred_net, None, curves,
        extras={"phase1_final": phase1_final, "phase2_init": phase2_init},
    )


def _with_epochs(cfg: TrainConfig, epochs: int) -> TrainConfig:
    import dataclasses

    decay = min(cfg.decay_start_epoch, epochs)
    return dataclasses.replace(cfg, total_epochs=epochs, decay_start_epoch=decay)


# ---------------------------------------------------------------------------
# Multi-task learning
# ---------------------------------------------------------------------------


def train_multitask(cfg: TrainConfig, source: ModalityDataset, target_train: ModalityDataset, run_seed: int) -> TrainOutputs:
    """One shared backbone with per-modality heads; the source head is dropped
    from the exported model after training."""
    if len(source) == 0 or len(target_train) == 0:
        raise ValueError("multi-task learning needs nonempty source and target data")
    torch.manual_seed(derive_seed(run_seed, "init"))
    pred_net = build_predictor(cfg.pred_arch, cfg.channels, base=cfg.pred_base, n_blocks=cfg.pred_blocks)
    source_head = nn.Linear(pred_net.feature_dim, 1)
    opt = torch.optim.Adam(
        list(pred_net.parameters()) + list(source_head.parameters()),
        lr=cfg.lr_predictor, betas=(cfg.beta1_predictor, cfg.beta2), eps=cfg.adam_eps,
    )
    src_data = dataset_to_tensors(source)
    tgt_data = dataset_to_tensors(target_train)
    data_seed = derive_seed(run_seed, "data")
    from .engine import paired_epoch_batches

    curves = []
    for epoch in range(cfg.total_epochs):
        lr = lr_at(epoch, cfg.lr_predictor, cfg)
        for group in opt.param_groups:
            group["lr"] = lr
        total, n_steps = 0.0, 0
        for (x_imgs, x_labels), (y_imgs, y_labels) in paired_epoch_batches(
            tgt_data, src_data, cfg.batch_size, data_seed, epoch
        ):
            opt.zero_grad(set_to_none=True)
            feats_tgt = pred_net.features(x_imgs)
            feats_src = pred_net.features(y_imgs)
            loss_tgt = nnf.mse_loss(pred_net.head(feats_tgt).squeeze(-1), x_labels)
            loss_src = nnf.mse_loss(source_head(feats_src).squeeze(-1), y_labels)
            loss = 0.5 * (loss_tgt + loss_src)
            _require_finite(loss, "multitask", {"mtl_total": float(loss.detach())})
            loss.backward()
            opt.step()
            total += float(loss.detach())
            n_steps += 1
        curves.append({"epoch": float(epoch), "mtl_total": total / max(n_steps, 1)})
    return TrainOutputs(pred_net, None, curves)


# ---------------------------------------------------------------------------
# Domain-adversarial adaptation
# ---------------------------------------------------------------------------


def dann_ramp(progress: float) -> float:
    """Standard 0-to-1 ramp for the domain loss weight."""
    return 2.0 / (1.0 + math.exp(-10.0 * progress)) - 1.0


def train_dann(cfg: TrainConfig, source: ModalityDataset, target_train: ModalityDataset, run_seed: int) -> TrainOutputs:
    """Shared backbone regressor with a domain classifier behind gradient
    reversal; both modalities contribute labeled regression losses."""
    if len(source) == 0 or len(target_train) == 0:
        raise ValueError("domain adaptation needs nonempty source and target data")
    torch.manual_seed(derive_seed(run_seed, "init"))
    pred_net = build_predictor(cfg.pred_arch, cfg.channels, base=cfg.pred_base, n_blocks=cfg.pred_blocks)
    grl = GradientReversal(1.0)
    domain_head = nn.Linear(pred_net.feature_dim, 1)
    opt = torch.optim.Adam(
        list(pred_net.parameters()) + list(domain_head.parameters()),
        lr=cfg.lr_predictor, betas=(cfg.beta1_predictor, cfg.beta2), eps=cfg.adam_eps,
    )
    src_data = dataset_to_tensors(source)
    tgt_data = dataset_to_tensors(target_train)
    data_seed = derive_seed(run_seed, "data")
    from .engine import paired_epoch_batches

    curves = []
    total_steps = cfg.total_epochs * max(
        1, math.ceil(max(len(source), len(target_train)) / cfg.batch_size)
    )
    step = 0
    for epoch in range(cfg.total_epochs):
        lr = lr_at(epoch, cfg.lr_predictor, cfg)
        for group in opt.param_groups:
            group["lr"] = lr
        sums = {"reg": 0.0, "domain": 0.0}
        n_steps = 0
        for (x_imgs, x_labels), (y_imgs, y_labels) in paired_epoch_batches(
            tgt_data, src_data, cfg.batch_size, data_seed, epoch
        ):
            opt.zero_grad(set_to_none=True)
            feats_tgt = pred_net.features(x_imgs)
            feats_src = pred_net.features(y_imgs)
            reg = nnf.mse_loss(pred_net.head(feats_tgt).squeeze(-1), x_labels) + \
                nnf.mse_loss(pred_net.head(feats_src).squeeze(-1), y_labels)
            logits = domain_head(grl(torch.cat([feats_tgt, feats_src]))).squeeze(-1)
            domain_labels = torch.cat([
                torch.ones(feats_tgt.shape[0]), torch.zeros(feats_src.shape[0])
            ]).to(logits.dtype)
            domain = nnf.binary_cross_entropy_with_logits(logits, domain_labels)
            weight = cfg.domain_loss_weight * dann_ramp(step / total_steps)
            loss = reg + weight * domain
            _require_finite(loss, "dann", {"reg": float(reg.detach()), "domain": float(domain.detach())})
            loss.backward()
            opt.step()
            sums["reg"] += float(reg.detach())
            sums["domain"] += float(domain.detach())
            n_steps += 1
            step += 1
        curves.append({
            "epoch": float(epoch),
            "reg": sums["reg"] / max(n_steps, 1),
            "domain": sums["domain"] / max(n_steps, 1),
        })
    return TrainOutputs(pred_net, None, curves)


# ---------------------------------------------------------------------------
# Two-stage translate-then-predict
# ---------------------------------------------------------------------------


def translate_dataset(gen: nn.Module, ds: ModalityDataset, target_modality: str, chunk: int = 64) -> ModalityDataset:
    """Push a whole dataset through a frozen generator, carrying labels."""
    imgs, _ = dataset_to_tensors(ds)
    outs = []
    gen.eval()
    with torch.no_grad():
        for start in range(0, imgs.shape[0], chunk):
            outs.append(translate(gen, imgs[start:start + chunk]))
    gen.train()
    pixels = torch.cat(outs).permute(0, 2, 3, 1).numpy()
    images = tuple(
        LabeledImage(np.ascontiguousarray(pixels[i]), img.label, target_modality, img.source_id)
        for i, img in enumerate(ds)
    )
    return ModalityDataset(images, target_modality)


def train_cyclegan_then_predict(
    cfg: TrainConfig, source: ModalityDataset, target_train: ModalityDataset, run_seed: int
) -> TrainOutputs:
    """Stage 1: translator trained alone (prediction coupling off). Stage 2:
    source images translated once through the frozen generator, predictor
    trained on the combined set for the same number of epochs."""
    if len(source) == 0 or len(target_train) == 0:
        raise ValueError("two-stage training needs nonempty source and target data")
    stage1 = train_joint(cfg, source, target_train, run_seed, couple_pred=False, update_pred=False)
    state = stage1.translator
    assert state is not None

    translated = translate_dataset(state.gen_s2t, source, target_train.modality)
    pred_net = stage1.predictor  # initialized but untouched during stage 1
    data_seed = derive_seed(run_seed, "data:stage2")
    curves = list(stage1.curves)
    train_predictor_on_batches(
        pred_net, cfg,
        lambda epoch: build_combined_training_view(
            translated, target_train, None, cfg.batch_size, data_seed, epoch
        ),
        curves,
    )
    return TrainOutputs(pred_net, state, curves)
