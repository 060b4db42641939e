"""Unpaired translation core: both generators, both patch discriminators, the
least-squares adversarial losses, the cycle-consistency loss, and the replay
buffers that feed stale fakes to the discriminators.
"""

from __future__ import annotations

import random
from dataclasses import dataclass, field

import torch
import torch.nn.functional as nnf

from .networks import PatchDiscriminator, ResnetGenerator

REAL_SCORE = 1.0
FAKE_SCORE = 0.0
DEFAULT_BUFFER_CAPACITY = 50


class ImageBuffer:
    """Bounded history of generated images.

    Under capacity every query stores and returns its input. Once full, each
    query returns the fresh image with probability 1/2, otherwise swaps it for
    a uniformly chosen stored one. Stored tensors are detached clones.
    """

    def __init__(self, capacity: int = DEFAULT_BUFFER_CAPACITY):
        if capacity < 1:
            raise ValueError("buffer capacity must be positive")
        self.capacity = capacity
        self.storage: list[torch.Tensor] = []

    def __len__(self) -> int:
        return len(self.storage)

    def query(self, fresh: torch.Tensor, rng: random.Random) -> torch.Tensor:
        fresh = fresh.detach()
        if len(self.storage) < self.capacity:
            self.storage.append(fresh.clone())
            return fresh
        if rng.random() < 0.5:
            return fresh
        idx = rng.randrange(self.capacity)
        old = self.storage[idx]
        self.storage[idx] = fresh.clone()
        return old

    def query_batch(self, fresh_batch: torch.Tensor, rng: random.Random) -> torch.Tensor:
        return torch.stack([self.query(img, rng) for img in fresh_batch])

    def state_dict(self) -> dict:
        return {"capacity": self.capacity, "storage": [t.clone() for t in self.storage]}

    def load_state_dict(self, state: dict) -> None:
        self.capacity = int(state["capacity"])
        self.storage = [t.clone() for t in state["storage"]]


@dataclass
class TranslatorState:
    """Both generators, both discriminators, and their replay buffers.

    ``gen_s2t`` maps source-modality images to the target modality, ``gen_t2s``
    maps back. ``disc_tgt`` judges target-modality images, ``disc_src`` judges
    source-modality images.
    """

    gen_s2t: ResnetGenerator
    gen_t2s: ResnetGenerator
    disc_src: PatchDiscriminator
    disc_tgt: PatchDiscriminator
    buffer_src: ImageBuffer = field(default_factory=ImageBuffer)
    buffer_tgt: ImageBuffer = field(default_factory=ImageBuffer)
    lambda_cyc: float = 10.0

    def __post_init__(self) -> None:
        if self.lambda_cyc <= 0:
            raise ValueError("lambda_cyc must be positive")

    def networks(self) -> dict[str, torch.nn.Module]:
        return {
            "gen_s2t": self.gen_s2t,
            "gen_t2s": self.gen_t2s,
            "disc_src": self.disc_src,
            "disc_tgt": self.disc_tgt,
        }


def build_translator(
    channels: int = 1,
    gen_base: int = 64,
    gen_blocks: int = 6,
    disc_base: int = 64,
    disc_layers: int = 3,
    lambda_cyc: float = 10.0,
    buffer_capacity: int = DEFAULT_BUFFER_CAPACITY,
    gen_stem_kernel: int = 7,
    gen_global_skip: bool = False,
) -> TranslatorState:
    return TranslatorState(
        gen_s2t=ResnetGenerator(channels, gen_base, gen_blocks, gen_stem_kernel, gen_global_skip),
        gen_t2s=ResnetGenerator(channels, gen_base, gen_blocks, gen_stem_kernel, gen_global_skip),
        disc_src=PatchDiscriminator(channels, disc_base, disc_layers),
        disc_tgt=PatchDiscriminator(channels, disc_base, disc_layers),
        buffer_src=ImageBuffer(buffer_capacity),
        buffer_tgt=ImageBuffer(buffer_capacity),
        lambda_cyc=lambda_cyc,
    )


def _check_batch(net, batch: torch.Tensor) -> None:
    if batch.ndim != 4:
        raise ValueError(f"expected NCHW batch, got shape {tuple(batch.shape)}")
    if batch.shape[1] != net.channels:
        raise ValueError(f"batch has {batch.shape[1]} channels, network expects {net.channels}")


def translate(gen: ResnetGenerator, batch: torch.Tensor) -> torch.Tensor:
    """Run a generator over a batch; output shape equals input shape."""
    _check_batch(gen, batch)
    if batch.shape[2] % 4 or batch.shape[3] % 4:
        raise ValueError(f"image sides must be divisible by 4, got {tuple(batch.shape[2:])}")
    return gen(batch)


def discriminate(disc: PatchDiscriminator, batch: torch.Tensor) -> torch.Tensor:
    """Per-image grid of raw patch scores."""
    _check_batch(disc, batch)
    return disc(batch)


def adv_loss_generator(disc: PatchDiscriminator, fake: torch.Tensor) -> torch.Tensor:
    """Least-squares generator loss: mean (score - 1)^2 over fakes."""
    if fake.shape[0] == 0:
        raise ValueError("empty batch")
    scores = discriminate(disc, fake)
    return ((scores - REAL_SCORE) ** 2).mean()


def adv_loss_discriminator(
    disc: PatchDiscriminator, real: torch.Tensor, fake_from_buffer: torch.Tensor
) -> torch.Tensor:
    """Least-squares discriminator loss, halved per the usual convention."""
    if real.shape[0] == 0 or fake_from_buffer.shape[0] == 0:
        raise ValueError("empty batch")
    real_scores = discriminate(disc, real)
    fake_scores = discriminate(disc, fake_from_buffer)
    return 0.5 * (((real_scores - REAL_SCORE) ** 2).mean() + ((fake_scores - FAKE_SCORE) ** 2).mean())


def cycle_loss(
    gen_s2t: ResnetGenerator,
    gen_t2s: ResnetGenerator,
    x_batch: torch.Tensor,
    y_batch: torch.Tensor,
) -> torch.Tensor:
    """Mean per-pixel L1 of both round trips (source->target->source and back)."""
    if x_batch.shape[0] == 0 or y_batch.shape[0] == 0:
        raise ValueError("empty batch")
    forward_cycle = nnf.l1_loss(gen_t2s(gen_s2t(y_batch)), y_batch)
    backward_cycle = nnf.l1_loss(gen_s2t(gen_t2s(x_batch)), x_batch)
    return forward_cycle + backward_cycle


def translation_loss(
    state: TranslatorState, x_batch: torch.Tensor, y_batch: torch.Tensor
) -> tuple[torch.Tensor, dict[str, float]]:
    """Generator-side objective of the translation subproblem.

    Returns the total plus a breakdown whose ``adv_s2t``, ``adv_t2s`` and
    ``cycle_weighted`` entries sum to ``total``.
    """
    adv_s2t = adv_loss_generator(state.disc_tgt, translate(state.gen_s2t, y_batch))
    adv_t2s = adv_loss_generator(state.disc_src, translate(state.gen_t2s, x_batch))
    cyc = cycle_loss(state.gen_s2t, state.gen_t2s, x_batch, y_batch)
    total = adv_s2t + adv_t2s + state.lambda_cyc * cyc
    # breakdown bookkeeping is done in float64 so the parts sum to the
    # reported total exactly, independent of tensor dtype
    parts = {
        "adv_s2t": float(adv_s2t.detach()),
        "adv_t2s": float(adv_t2s.detach()),
        "cycle_weighted": state.lambda_cyc * float(cyc.detach()),
    }
    breakdown = dict(parts)
    breakdown["cycle_raw"] = float(cyc.detach())
    breakdown["total"] = sum(parts.values())
    return total, breakdown
