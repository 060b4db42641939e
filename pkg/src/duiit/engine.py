"""Joint optimization engine: alternating generator / discriminator / predictor
updates, learning-rate schedules, and the seeded multi-run experiment driver.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import random
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
import torch

from .checkpoint import save_checkpoint
from .data import ModalityDataset, SplitSpec, split_dataset
from .networks import build_predictor, default_n_blocks
from .predictor import LabeledBatch, dataset_to_tensors, predict, prediction_loss
from .translator import (
    TranslatorState,
    adv_loss_discriminator,
    adv_loss_generator,
    build_translator,
    cycle_loss,
    translate,
    translation_loss,
)

METHODS = ("ours", "pure", "cyclegan", "tl", "mtl", "dann", "simple-aug", "random-erasing")


class TrainingDiverged(RuntimeError):
    """Raised when a loss goes non-finite; carries the offending step log."""


@dataclass
class TrainConfig:
    """Hyperparameters of a training run."""

    lambda_pred: float = 0.001      # tradeoff between translation and prediction loss
    lambda_cyc: float = 10.0
    lr_translator: float = 0.0002
    lr_predictor: float = 0.001
    decay_start_epoch: int = 100
    total_epochs: int = 200
    batch_size: int = 1
    beta1_translator: float = 0.5   # GAN convention
    beta1_predictor: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    n_runs: int = 10
    channels: int = 1
    gen_base: int = 64
    gen_blocks: int | None = None   # None: 9 at >=256px else 6
    gen_stem_kernel: int = 7
    gen_global_skip: bool = False
    disc_base: int = 64
    disc_layers: int = 3
    pred_arch: str = "small"
    pred_base: int = 12
    pred_blocks: int = 4
    buffer_capacity: int = 50
    source_loss_weight: float = 1.0
    target_loss_weight: float = 1.0
    pred_start_epoch: int = 0       # staging knob; 0 = joint from the first step
    domain_loss_weight: float = 0.1  # dann only
    channels_last: bool = True      # NHWC layout for CPU conv throughput

    def __post_init__(self) -> None:
        if self.lambda_pred < 0:
            raise ValueError("lambda_pred must be >= 0")
        if self.lambda_cyc <= 0:
            raise ValueError("lambda_cyc must be > 0")
        if not (0 < self.decay_start_epoch <= self.total_epochs):
            raise ValueError("need 0 < decay_start_epoch <= total_epochs")
        if self.lr_translator <= 0 or self.lr_predictor <= 0:
            raise ValueError("learning rates must be > 0")
        if self.batch_size < 1 or self.n_runs < 1 or self.total_epochs < 1:
            raise ValueError("batch_size, n_runs, and total_epochs must be >= 1")

    def resolved_gen_blocks(self, resolution: tuple[int, int]) -> int:
        return self.gen_blocks if self.gen_blocks is not None else default_n_blocks(resolution)


def derive_seed(root: int, tag: str) -> int:
    """Stable component seed: crc32 of the tag mixed into the root seed."""
    return (root * 1_000_003 + zlib.crc32(tag.encode())) % (2**31 - 1)


def lr_at(epoch: int, base_lr: float, cfg: TrainConfig) -> float:
    """Constant ``base_lr`` until the decay start, then linear to 0 at the end."""
    if not 0 <= epoch < cfg.total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.total_epochs})")
    if epoch < cfg.decay_start_epoch:
        return base_lr
    return base_lr * (cfg.total_epochs - epoch) / (cfg.total_epochs - cfg.decay_start_epoch)


def joint_loss(
    state: TranslatorState,
    pred_net: torch.nn.Module,
    x_batch: LabeledBatch,
    y_batch: LabeledBatch,
    cfg: TrainConfig,
) -> tuple[torch.Tensor, dict[str, float]]:
    """Translation loss plus ``lambda_pred`` times the prediction loss."""
    x_imgs, _ = x_batch
    y_imgs, _ = y_batch
    trans_total, breakdown = translation_loss(state, x_imgs, y_imgs)
    total = trans_total
    breakdown["pred"] = 0.0
    breakdown["pred_weighted"] = 0.0
    if cfg.lambda_pred > 0:
        pred = prediction_loss(
            pred_net,
            state.gen_s2t,
            y_batch,
            x_batch,
            source_weight=cfg.source_loss_weight,
            target_weight=cfg.target_loss_weight,
        )
        total = trans_total + cfg.lambda_pred * pred
        breakdown["pred"] = float(pred.detach())
        breakdown["pred_weighted"] = cfg.lambda_pred * float(pred.detach())
    breakdown["total"] = (
        breakdown["adv_s2t"] + breakdown["adv_t2s"] + breakdown["cycle_weighted"] + breakdown["pred_weighted"]
    )
    return total, breakdown


def _require_finite(value: torch.Tensor, context: str, log: dict[str, float]) -> None:
    if not torch.isfinite(value):
        raise TrainingDiverged(f"non-finite {context} loss: {float(value.detach())!r}; step log: {log}")


def _set_requires_grad(nets: Sequence[torch.nn.Module], flag: bool) -> None:
    for net in nets:
        for p in net.parameters():
            p.requires_grad_(flag)


@dataclass
class JointOptimizers:
    gen: torch.optim.Adam
    disc_tgt: torch.optim.Adam
    disc_src: torch.optim.Adam
    pred: torch.optim.Adam

    @classmethod
    def create(cls, state: TranslatorState, pred_net: torch.nn.Module, cfg: TrainConfig) -> "JointOptimizers":
        betas_t = (cfg.beta1_translator, cfg.beta2)
        betas_p = (cfg.beta1_predictor, cfg.beta2)
        gen_params = list(state.gen_s2t.parameters()) + list(state.gen_t2s.parameters())
        return cls(
            gen=torch.optim.Adam(gen_params, lr=cfg.lr_translator, betas=betas_t, eps=cfg.adam_eps),
            disc_tgt=torch.optim.Adam(state.disc_tgt.parameters(), lr=cfg.lr_translator, betas=betas_t, eps=cfg.adam_eps),
            disc_src=torch.optim.Adam(state.disc_src.parameters(), lr=cfg.lr_translator, betas=betas_t, eps=cfg.adam_eps),
            pred=torch.optim.Adam(pred_net.parameters(), lr=cfg.lr_predictor, betas=betas_p, eps=cfg.adam_eps),
        )

    def set_epoch_lrs(self, epoch: int, cfg: TrainConfig) -> None:
        lr_t = lr_at(epoch, cfg.lr_translator, cfg)
        lr_p = lr_at(epoch, cfg.lr_predictor, cfg)
        for opt in (self.gen, self.disc_tgt, self.disc_src):
            for group in opt.param_groups:
                group["lr"] = lr_t
        for group in self.pred.param_groups:
            group["lr"] = lr_p


def generator_update(
    state: TranslatorState,
    pred_net: torch.nn.Module,
    x_batch: LabeledBatch,
    y_batch: LabeledBatch,
    cfg: TrainConfig,
    opt_gen: torch.optim.Optimizer,
    couple_pred: bool = True,
) -> tuple[dict[str, float], torch.Tensor, torch.Tensor]:
    """Sub-update (1): one Adam step on both generators.

    Minimizes the generator-side adversarial terms, the weighted cycle loss,
    and (when coupled) the translated-source part of the prediction loss.
    Discriminators and predictor are frozen. Returns the detached fakes so the
    later sub-updates can reuse them.
    """
    x_imgs, _ = x_batch
    y_imgs, y_labels = y_batch
    frozen = [state.disc_src, state.disc_tgt, pred_net]
    _set_requires_grad(frozen, False)
    try:
        opt_gen.zero_grad(set_to_none=True)
        fake_tgt = translate(state.gen_s2t, y_imgs)
        fake_src = translate(state.gen_t2s, x_imgs)
        adv_s2t = adv_loss_generator(state.disc_tgt, fake_tgt)
        adv_t2s = adv_loss_generator(state.disc_src, fake_src)
        cyc = torch.nn.functional.l1_loss(translate(state.gen_t2s, fake_tgt), y_imgs) + \
            torch.nn.functional.l1_loss(translate(state.gen_s2t, fake_src), x_imgs)
        loss = adv_s2t + adv_t2s + state.lambda_cyc * cyc
        log = {
            "adv_s2t": float(adv_s2t.detach()),
            "adv_t2s": float(adv_t2s.detach()),
            "cycle_raw": float(cyc.detach()),
        }
        if couple_pred and cfg.lambda_pred > 0:
            pred_src = cfg.source_loss_weight * torch.nn.functional.mse_loss(
                predict(pred_net, fake_tgt), y_labels
            )
            loss = loss + cfg.lambda_pred * pred_src
            log["pred_src"] = float(pred_src.detach())
        log["gen_total"] = float(loss.detach())
        _require_finite(loss, "generator", log)
        loss.backward()
        opt_gen.step()
    finally:
        _set_requires_grad(frozen, True)
    return log, fake_tgt.detach(), fake_src.detach()


def discriminator_update(
    state: TranslatorState,
    x_batch: LabeledBatch,
    y_batch: LabeledBatch,
    fake_tgt: torch.Tensor,
    fake_src: torch.Tensor,
    opt_disc_tgt: torch.optim.Optimizer,
    opt_disc_src: torch.optim.Optimizer,
    buffer_rng: random.Random,
) -> dict[str, float]:
    """Sub-update (2): one Adam step each for the target then source
    discriminator, fakes drawn through the replay buffers. Generators untouched.
    """
    x_imgs, _ = x_batch
    y_imgs, _ = y_batch
    log: dict[str, float] = {}
    for name, disc, opt, real, fresh_fake, buf in (
        ("disc_tgt", state.disc_tgt, opt_disc_tgt, x_imgs, fake_tgt, state.buffer_tgt),
        ("disc_src", state.disc_src, opt_disc_src, y_imgs, fake_src, state.buffer_src),
    ):
        opt.zero_grad(set_to_none=True)
        pool_fake = buf.query_batch(fresh_fake, buffer_rng)
        loss = adv_loss_discriminator(disc, real, pool_fake)
        log[name] = float(loss.detach())
        _require_finite(loss, name, log)
        loss.backward()
        opt.step()
    return log


def predictor_update(
    pred_net: torch.nn.Module,
    fake_tgt_detached: torch.Tensor,
    y_labels: torch.Tensor,
    x_batch: LabeledBatch,
    cfg: TrainConfig,
    opt_pred: torch.optim.Optimizer,
) -> dict[str, float]:
    """Sub-update (3): one Adam step on the predictor over the current
    translations (generator frozen via detach) plus the real target batch.
    """
    opt_pred.zero_grad(set_to_none=True)
    loss = prediction_loss(
        pred_net,
        None,
        (fake_tgt_detached, y_labels),
        x_batch,
        source_weight=cfg.source_loss_weight,
        target_weight=cfg.target_loss_weight,
    )
    log = {"pred_total": float(loss.detach())}
    _require_finite(loss, "predictor", log)
    loss.backward()
    opt_pred.step()
    return log


def train_step(
    state: TranslatorState,
    pred_net: torch.nn.Module,
    x_batch: LabeledBatch,
    y_batch: LabeledBatch,
    cfg: TrainConfig,
    opts: JointOptimizers,
    buffer_rng: random.Random,
    couple_pred: bool = True,
    update_pred: bool = True,
) -> dict[str, float]:
    """One joint step: generators, then discriminators, then predictor."""
    log, fake_tgt, fake_src = generator_update(state, pred_net, x_batch, y_batch, cfg, opts.gen, couple_pred)
    log.update(discriminator_update(state, x_batch, y_batch, fake_tgt, fake_src, opts.disc_tgt, opts.disc_src, buffer_rng))
    if update_pred:
        log.update(predictor_update(pred_net, fake_tgt, y_batch[1], x_batch, cfg, opts.pred))
    return log


# ---------------------------------------------------------------------------
# Epoch iteration
# ---------------------------------------------------------------------------


def paired_epoch_batches(
    x_data: LabeledBatch,
    y_data: LabeledBatch,
    batch_size: int,
    seed: int,
    epoch: int,
):
    """Yield (x_batch, y_batch) pairs; the larger set is covered exactly once
    per epoch and the smaller one is cycled with fresh shuffles."""
    n_x, n_y = x_data[0].shape[0], y_data[0].shape[0]
    n_max = max(n_x, n_y)
    rng = np.random.default_rng((seed, epoch))

    def tiled(n: int) -> np.ndarray:
        reps = []
        total = 0
        while total < n_max:
            reps.append(rng.permutation(n))
            total += n
        return np.concatenate(reps)[:n_max]

    x_idx, y_idx = tiled(n_x), tiled(n_y)
    for start in range(0, n_max, batch_size):
        xs = torch.from_numpy(x_idx[start:start + batch_size])
        ys = torch.from_numpy(y_idx[start:start + batch_size])
        yield (x_data[0][xs], x_data[1][xs]), (y_data[0][ys], y_data[1][ys])


def single_epoch_batches(data: LabeledBatch, batch_size: int, seed: int, epoch: int):
    n = data[0].shape[0]
    order = np.random.default_rng((seed, epoch)).permutation(n)
    for start in range(0, n, batch_size):
        sel = torch.from_numpy(order[start:start + batch_size])
        yield data[0][sel], data[1][sel]


def evaluate_mse(net: torch.nn.Module, data: LabeledBatch, chunk: int = 256) -> float:
    imgs, labels = data
    errs = []
    net.eval()
    with torch.no_grad():
        for start in range(0, imgs.shape[0], chunk):
            preds = predict(net, imgs[start:start + chunk])
            errs.append((preds.double() - labels[start:start + chunk].double()) ** 2)
    net.train()
    return float(torch.cat(errs).mean())


# ---------------------------------------------------------------------------
# Trainers
# ---------------------------------------------------------------------------


@dataclass
class TrainOutputs:
    predictor: torch.nn.Module
    translator: TranslatorState | None
    curves: list[dict[str, float]]
    extras: dict[str, Any] = field(default_factory=dict)


def build_networks(cfg: TrainConfig, resolution: tuple[int, int]) -> tuple[TranslatorState, torch.nn.Module]:
    state = build_translator(
        channels=cfg.channels,
        gen_base=cfg.gen_base,
        gen_blocks=cfg.resolved_gen_blocks(resolution),
        disc_base=cfg.disc_base,
        disc_layers=cfg.disc_layers,
        lambda_cyc=cfg.lambda_cyc,
        buffer_capacity=cfg.buffer_capacity,
        gen_stem_kernel=cfg.gen_stem_kernel,
        gen_global_skip=cfg.gen_global_skip,
    )
    pred_net = build_predictor(cfg.pred_arch, cfg.channels, base=cfg.pred_base, n_blocks=cfg.pred_blocks)
    if cfg.channels_last:
        for net in list(state.networks().values()) + [pred_net]:
            net.to(memory_format=torch.channels_last)
    return state, pred_net


def _batch_layout(batch: LabeledBatch, cfg: TrainConfig) -> LabeledBatch:
    if cfg.channels_last:
        return batch[0].to(memory_format=torch.channels_last), batch[1]
    return batch


def train_joint(
    cfg: TrainConfig,
    source_train: ModalityDataset,
    target_train: ModalityDataset,
    run_seed: int,
    couple_pred: bool = True,
    update_pred: bool = True,
) -> TrainOutputs:
    """The joint loop: translator and predictor trained together."""
    torch.manual_seed(derive_seed(run_seed, "init"))
    state, pred_net = build_networks(cfg, target_train.resolution)
    opts = JointOptimizers.create(state, pred_net, cfg)
    buffer_rng = random.Random(derive_seed(run_seed, "buffer"))
    data_seed = derive_seed(run_seed, "data")
    x_data = dataset_to_tensors(target_train)
    y_data = dataset_to_tensors(source_train)

    curves = []
    for epoch in range(cfg.total_epochs):
        opts.set_epoch_lrs(epoch, cfg)
        staged_on = epoch >= cfg.pred_start_epoch
        sums: dict[str, float] = {}
        n_steps = 0
        for x_batch, y_batch in paired_epoch_batches(x_data, y_data, cfg.batch_size, data_seed, epoch):
            log = train_step(
                state, pred_net, _batch_layout(x_batch, cfg), _batch_layout(y_batch, cfg), cfg, opts, buffer_rng,
                couple_pred=couple_pred and staged_on,
                update_pred=update_pred and staged_on,
            )
            for key, val in log.items():
                sums[key] = sums.get(key, 0.0) + val
            n_steps += 1
        row = {key: val / n_steps for key, val in sums.items()}
        row["epoch"] = float(epoch)
        curves.append(row)
    return TrainOutputs(pred_net, state, curves)


def train_predictor_on_batches(
    pred_net: torch.nn.Module,
    cfg: TrainConfig,
    epoch_batches: Callable[[int], Any],
    curves: list[dict[str, float]] | None = None,
) -> torch.nn.Module:
    """Generic predictor-only loop with the shared lr schedule."""
    opt = torch.optim.Adam(
        pred_net.parameters(), lr=cfg.lr_predictor,
        betas=(cfg.beta1_predictor, cfg.beta2), eps=cfg.adam_eps,
    )
    for epoch in range(cfg.total_epochs):
        lr = lr_at(epoch, cfg.lr_predictor, cfg)
        for group in opt.param_groups:
            group["lr"] = lr
        total, n_steps = 0.0, 0
        for imgs, labels in epoch_batches(epoch):
            if cfg.channels_last:
                imgs = imgs.to(memory_format=torch.channels_last)
            opt.zero_grad(set_to_none=True)
            loss = torch.nn.functional.mse_loss(predict(pred_net, imgs), labels)
            _require_finite(loss, "predictor", {"pred_total": float(loss.detach())})
            loss.backward()
            opt.step()
            total += float(loss.detach())
            n_steps += 1
        if curves is not None:
            curves.append({"epoch": float(epoch), "pred_total": total / max(n_steps, 1)})
    return pred_net


def train_pure(cfg: TrainConfig, source_train, target_train: ModalityDataset, run_seed: int) -> TrainOutputs:
    """Predictor trained on target-modality data only."""
    torch.manual_seed(derive_seed(run_seed, "init"))
    pred_net = build_predictor(cfg.pred_arch, cfg.channels, base=cfg.pred_base, n_blocks=cfg.pred_blocks)
    if cfg.channels_last:
        pred_net.to(memory_format=torch.channels_last)
    data_seed = derive_seed(run_seed, "data")
    data = dataset_to_tensors(target_train)
    curves: list[dict[str, float]] = []
    train_predictor_on_batches(
        pred_net, cfg,
        lambda epoch: single_epoch_batches(data, cfg.batch_size, data_seed, epoch),
        curves,
    )
    return TrainOutputs(pred_net, None, curves)


# ---------------------------------------------------------------------------
# Experiment driver
# ---------------------------------------------------------------------------

REPORT_SCHEMA_VERSION = 1


@dataclass
class RunReport:
    """Per-seed results plus mean/std aggregate for one method."""

    method: str
    config_hash: str
    protocol_hash: str
    runs: list[dict[str, Any]] = field(default_factory=list)
    mean: float = math.nan
    std: float = math.nan
    flags: dict[str, Any] = field(default_factory=dict)
    wall_clock_sec: float = 0.0
    config: dict[str, Any] = field(default_factory=dict)
    metrics: dict[str, Any] = field(default_factory=dict)
    schema_version: int = REPORT_SCHEMA_VERSION

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RunReport":
        known = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in data.items() if k in known})


def aggregate(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample (n-1) standard deviation; std is 0 for a single value."""
    if not values:
        raise ValueError("no values to aggregate")
    mean = float(np.mean(values))
    std = 0.0 if len(values) < 2 else float(np.std(values, ddof=1))
    return mean, std


def config_hash(payload: dict[str, Any]) -> str:
    blob = json.dumps(payload, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


def _write_losses_csv(path: Path, curves: list[dict[str, float]]) -> None:
    if not curves:
        return
    keys = ["epoch"] + sorted({k for row in curves for k in row} - {"epoch"})
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(keys) + "\n")
        for row in curves:
            fh.write(",".join(repr(row.get(k, math.nan)) for k in keys) + "\n")


def get_trainer(method: str) -> Callable[..., TrainOutputs]:
    if method == "ours":
        return train_joint
    if method == "pure":
        return train_pure
    from . import baselines

    table = {
        "cyclegan": baselines.train_cyclegan_then_predict,
        "tl": baselines.train_transfer,
        "mtl": baselines.train_multitask,
        "dann": baselines.train_dann,
        "simple-aug": baselines.train_simple_augment,
        "random-erasing": baselines.train_random_erasing,
    }
    if method not in table:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    return table[method]


def execute_single_run(
    cfg: TrainConfig,
    source: ModalityDataset | None,
    target: ModalityDataset,
    split_spec: SplitSpec,
    method: str,
    run_index: int,
    out_dir: Path | None = None,
) -> dict[str, Any]:
    """Split, train, and evaluate one seeded run; returns the per-run record."""
    run_seed = derive_seed(cfg.seed, f"run:{run_index}")
    split = dataclasses.replace(split_spec, seed=derive_seed(run_seed, "split"))
    target_train, target_val, target_test = split_dataset(target, split)
    trainer = get_trainer(method)
    started = time.perf_counter()
    record: dict[str, Any] = {"run_index": run_index, "seed": run_seed, "status": "ok"}
    try:
        outputs = trainer(cfg, source, target_train, run_seed)
        record["test_mse"] = evaluate_mse(outputs.predictor, dataset_to_tensors(target_test))
        record["val_mse"] = evaluate_mse(outputs.predictor, dataset_to_tensors(target_val))
    except TrainingDiverged as exc:
        record["status"] = "diverged"
        record["error"] = str(exc)
        outputs = None
    record["wall_clock_sec"] = time.perf_counter() - started
    if out_dir is not None and outputs is not None:
        run_dir = out_dir / str(run_seed)
        run_dir.mkdir(parents=True, exist_ok=True)
        _write_losses_csv(run_dir / "losses.csv", outputs.curves)
        meta = {
            "channels": cfg.channels,
            "gen_base": cfg.gen_base,
            "gen_blocks": cfg.resolved_gen_blocks(target.resolution),
            "gen_stem_kernel": cfg.gen_stem_kernel,
            "gen_global_skip": cfg.gen_global_skip,
            "disc_base": cfg.disc_base,
            "disc_layers": cfg.disc_layers,
            "pred_arch": cfg.pred_arch,
            "pred_base": cfg.pred_base,
            "pred_blocks": cfg.pred_blocks,
            "resolution": list(target.resolution),
            "method": method,
        }
        save_checkpoint(
            run_dir / "checkpoint.duiit",
            step=cfg.total_epochs,
            translator=outputs.translator,
            predictor=outputs.predictor,
            meta=meta,
        )
    return record


def _run_worker(args: tuple) -> dict[str, Any]:
    cfg, source, target, split_spec, method, run_index, out_dir = args
    torch.set_num_threads(1)
    return execute_single_run(cfg, source, target, split_spec, method, run_index, out_dir)


def run_experiment(
    cfg: TrainConfig,
    source: ModalityDataset | None,
    target: ModalityDataset,
    split_spec: SplitSpec,
    method: str = "ours",
    out_root: Path | str | None = None,
    jobs: int = 1,
) -> RunReport:
    """Train ``cfg.n_runs`` seeded runs and aggregate their test MSE.

    Every run re-splits the target data with a seed derived from the root
    seed, trains to ``total_epochs``, and scores the final predictor on the
    test split. Diverged runs are excluded from the aggregate and flagged.
    """
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}; expected one of {METHODS}")
    if method != "pure" and (source is None or len(source) == 0):
        raise ValueError(f"method {method!r} needs a source dataset")

    cfg_payload = dataclasses.asdict(cfg)
    protocol_payload = {
        "split": dataclasses.asdict(split_spec),
        "seed": cfg.seed,
        "n_runs": cfg.n_runs,
        "total_epochs": cfg.total_epochs,
        "n_source": len(source) if source is not None else 0,
        "n_target": len(target),
    }
    full_hash = config_hash({"config": cfg_payload, "protocol": protocol_payload, "method": method})
    proto_hash = config_hash(protocol_payload)

    out_dir: Path | None = None
    if out_root is not None:
        out_dir = Path(out_root) / full_hash
        out_dir.mkdir(parents=True, exist_ok=True)

    started = time.perf_counter()
    tasks = [(cfg, source, target, split_spec, method, i, out_dir) for i in range(cfg.n_runs)]
    if jobs > 1 and cfg.n_runs > 1:
        import multiprocessing as mp
        from concurrent.futures import ProcessPoolExecutor

        ctx = mp.get_context("spawn")
        with ProcessPoolExecutor(max_workers=jobs, mp_context=ctx) as pool:
            records = list(pool.map(_run_worker, tasks))
    else:
        records = [execute_single_run(*t) for t in tasks]

    ok = [r["test_mse"] for r in records if r["status"] == "ok"]
    flags: dict[str, Any] = {}
    if len(ok) < len(records):
        flags["excluded_runs"] = len(records) - len(ok)
    if len(ok) == 1:
        flags["single_run"] = True
    mean, std = aggregate(ok) if ok else (math.nan, math.nan)

    report = RunReport(
        method=method,
        config_hash=full_hash,
        protocol_hash=proto_hash,
        runs=records,
        mean=mean,
        std=std,
        flags=flags,
        wall_clock_sec=time.perf_counter() - started,
        config={"config": cfg_payload, "protocol": protocol_payload},
    )
    if out_dir is not None:
        with open(out_dir / "report.json", "w", encoding="utf-8") as fh:
            json.dump(report.to_dict(), fh, indent=2)
            fh.write("\n")
    return report
