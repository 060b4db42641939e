"""Versioned checkpoint archive.

Layout: the first line of the file is the ASCII magic ``DUIIT-CKPT-1`` followed
by a newline; the rest is a torch-serialized payload holding the four
translator networks, both replay buffers, the optional predictor section, the
step counter, and the architecture hyperparameters needed to rebuild the nets.
"""

from __future__ import annotations

from pathlib import Path
from typing import Any

import torch

from .networks import IdentityGenerator, PatchDiscriminator, ResnetGenerator, build_predictor
from .translator import ImageBuffer, TranslatorState

MAGIC = b"DUIIT-CKPT-1"


class CheckpointError(RuntimeError):
    """Raised for unreadable or incompatible checkpoint files."""


def save_checkpoint(
    path: Path | str,
    step: int,
    translator: TranslatorState | None = None,
    predictor: torch.nn.Module | None = None,
    meta: dict[str, Any] | None = None,
) -> None:
    payload: dict[str, Any] = {"step": int(step), "meta": dict(meta or {})}
    if translator is not None:
        payload["translator"] = {
            "nets": {name: net.state_dict() for name, net in translator.networks().items()},
            "buffer_src": translator.buffer_src.state_dict(),
            "buffer_tgt": translator.buffer_tgt.state_dict(),
            "lambda_cyc": translator.lambda_cyc,
        }
    if predictor is not None:
        payload["predictor"] = predictor.state_dict()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC + b"\n")
        torch.save(payload, fh)


def _read_payload(path: Path | str) -> dict[str, Any]:
    with open(path, "rb") as fh:
        header = fh.readline().rstrip(b"\n")
        if header != MAGIC:
            raise CheckpointError(f"{path}: bad magic header {header[:20]!r}, expected {MAGIC.decode()}")
        return torch.load(fh, weights_only=False)


def load_checkpoint(path: Path | str) -> dict[str, Any]:
    """Load the raw payload (meta, step, state dicts)."""
    return _read_payload(path)


def restore_translator(payload: dict[str, Any]) -> TranslatorState:
    """Rebuild a TranslatorState from a checkpoint payload."""
    if "translator" not in payload:
        raise CheckpointError("checkpoint has no translator section")
    meta = payload["meta"]
    section = payload["translator"]
    channels = meta["channels"]
    if meta.get("gen_arch") == "identity":
        gen = lambda: IdentityGenerator(channels)  # noqa: E731
    else:
        gen = lambda: ResnetGenerator(channels, meta["gen_base"], meta["gen_blocks"], meta.get("gen_stem_kernel", 7), meta.get("gen_global_skip", False))  # noqa: E731
    disc = lambda: PatchDiscriminator(channels, meta["disc_base"], meta["disc_layers"])  # noqa: E731
    state = TranslatorState(
        gen_s2t=gen(),
        gen_t2s=gen(),
        disc_src=disc(),
        disc_tgt=disc(),
        buffer_src=ImageBuffer(section["buffer_src"]["capacity"]),
        buffer_tgt=ImageBuffer(section["buffer_tgt"]["capacity"]),
        lambda_cyc=section["lambda_cyc"],
    )
    for name, net in state.networks().items():
        net.load_state_dict(section["nets"][name])
    state.buffer_src.load_state_dict(section["buffer_src"])
    state.buffer_tgt.load_state_dict(section["buffer_tgt"])
    return state


def restore_predictor(payload: dict[str, Any]) -> torch.nn.Module:
    """Rebuild the predictor network from a checkpoint payload."""
    if "predictor" not in payload:
        raise CheckpointError("checkpoint has no predictor section")
    meta = payload["meta"]
    net = build_predictor(
        meta.get("pred_arch", "small"),
        meta["channels"],
        base=meta.get("pred_base", 12),
        n_blocks=meta.get("pred_blocks", 4),
    )
    net.load_state_dict(payload["predictor"])
    return net
