"""Regression predictor and the combined real+translated prediction loss."""

from __future__ import annotations

from typing import Iterator

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as nnf

from .data import ModalityDataset
from .translator import translate

LabeledBatch = tuple[torch.Tensor, torch.Tensor]  # (images NCHW, labels N)


def dataset_to_tensors(ds: ModalityDataset, dtype: torch.dtype = torch.float32) -> LabeledBatch:
    """Stack a dataset into (images NCHW, labels N) tensors."""
    imgs = torch.from_numpy(np.stack([img.pixels for img in ds])).permute(0, 3, 1, 2)
    labels = torch.tensor([img.label for img in ds])
    return imgs.to(dtype).contiguous(), labels.to(dtype)


def predict(net: nn.Module, batch: torch.Tensor) -> torch.Tensor:
    """One scalar per image."""
    if batch.ndim != 4:
        raise ValueError(f"expected NCHW batch, got shape {tuple(batch.shape)}")
    if batch.shape[1] != net.channels:
        raise ValueError(f"batch has {batch.shape[1]} channels, predictor expects {net.channels}")
    out = net(batch)
    return out.reshape(batch.shape[0])


def prediction_loss(
    net: nn.Module,
    gen_s2t: nn.Module | None,
    source_batch: LabeledBatch | None,
    target_batch: LabeledBatch | None,
    source_weight: float = 1.0,
    target_weight: float = 1.0,
) -> torch.Tensor:
    """Squared-error loss over translated-source pairs plus real-target pairs.

    Each part is the mean over its batch; the two means are weighted equally by
    default. Source images are pushed through ``gen_s2t`` inside this call so
    gradients reach the generator; pass ``gen_s2t=None`` for source images that
    are already in the target modality.
    """

    def empty(batch: LabeledBatch | None) -> bool:
        return batch is None or batch[0].shape[0] == 0

    if empty(source_batch) and empty(target_batch):
        raise ValueError("both batches empty")
    total: torch.Tensor | None = None
    if not empty(source_batch):
        imgs, labels = source_batch
        translated = translate(gen_s2t, imgs) if gen_s2t is not None else imgs
        part = source_weight * nnf.mse_loss(predict(net, translated), labels)
        total = part
    if not empty(target_batch):
        imgs, labels = target_batch
        part = target_weight * nnf.mse_loss(predict(net, imgs), labels)
        total = part if total is None else total + part
    assert total is not None
    return total


def build_combined_training_view(
    source: ModalityDataset,
    target: ModalityDataset,
    gen_s2t: nn.Module | None,
    batch_size: int,
    seed: int,
    epoch: int = 0,
    dtype: torch.dtype = torch.float32,
) -> Iterator[LabeledBatch]:
    """Yield interleaved labeled batches covering both sets exactly once.

    Source images are translated through the current generator (under
    ``no_grad``) at iteration time, so a generator updated between epochs
    produces fresh translations. ``gen_s2t=None`` means the source set is
    already in the target modality. The shuffle is a pure function of
    ``(seed, epoch)``.
    """
    if len(source) == 0 and len(target) == 0:
        raise ValueError("both datasets empty")
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    src_imgs, src_labels = (
        dataset_to_tensors(source, dtype) if len(source) else (None, None)
    )
    tgt_imgs, tgt_labels = (
        dataset_to_tensors(target, dtype) if len(target) else (None, None)
    )
    n_src = len(source)
    n_total = n_src + len(target)
    order = np.random.default_rng((seed, epoch)).permutation(n_total)
    for start in range(0, n_total, batch_size):
        idx = order[start:start + batch_size]
        imgs, labels = [], []
        src_sel = idx[idx < n_src]
        tgt_sel = idx[idx >= n_src] - n_src
        if src_sel.size:
            batch = src_imgs[torch.from_numpy(src_sel)]
            if gen_s2t is not None:
                with torch.no_grad():
                    batch = translate(gen_s2t, batch)
            imgs.append(batch)
            labels.append(src_labels[torch.from_numpy(src_sel)])
        if tgt_sel.size:
            imgs.append(tgt_imgs[torch.from_numpy(tgt_sel)])
            labels.append(tgt_labels[torch.from_numpy(tgt_sel)])
        yield torch.cat(imgs), torch.cat(labels)
