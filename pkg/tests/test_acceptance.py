"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -s`` to watch the lines appear;
the desk-scale trend experiment (criteria 3 and 4) trains fifteen small GAN
runs and takes the bulk of the time.
"""

import math
import random
import time

import numpy as np
import pytest
import torch

from duiit.baselines import (
    RANDOM_ERASING,
    SIMPLE_AUGMENT,
    GradientReversal,
    augment_random_erasing,
    augment_simple,
    train_transfer,
)
from duiit.data import (
    LabeledImage,
    ModalityDataset,
    SplitSpec,
    SyntheticTaskSpec,
    generate_synthetic_task,
    split_dataset,
)
from duiit.engine import (
    TrainConfig,
    aggregate,
    build_networks,
    joint_loss,
    lr_at,
    run_experiment,
)
from duiit.metrics import (
    TinyFeatureExtractor,
    fid_from_features,
    inception_score_from_probs,
    matrix_sqrt_product,
)
from duiit.networks import count_parameters
from duiit.predictor import prediction_loss
from duiit.translator import (
    ImageBuffer,
    adv_loss_discriminator,
    adv_loss_generator,
    cycle_loss,
    translation_loss,
)

torch.set_num_threads(2)


def report(criterion: int, name: str, ok: bool, detail: str) -> None:
    print(f"\nACCEPTANCE {criterion} ({name}): {'PASS' if ok else 'FAIL'} — {detail}")
    assert ok, f"criterion {criterion} ({name}) failed: {detail}"


# ---------------------------------------------------------------------------
# tiny double-precision fixtures for the gradient suite
# ---------------------------------------------------------------------------

GRAD_SEED = 20240

def tiny_setup(seed=GRAD_SEED):
    cfg = TrainConfig(
        lambda_pred=0.7, lambda_cyc=10.0, total_epochs=2, decay_start_epoch=2,
        batch_size=2, n_runs=1, gen_base=2, gen_blocks=1, gen_stem_kernel=3,
        disc_base=1, disc_layers=1, pred_base=3, pred_blocks=1,
    )
    torch.manual_seed(seed)
    state, pred = build_networks(cfg, (8, 8))
    for net in list(state.networks().values()) + [pred]:
        net.double()
    gen = torch.Generator().manual_seed(seed + 1)
    x = (
        (torch.rand(2, 1, 8, 8, generator=gen, dtype=torch.float64) * 2 - 1),
        torch.rand(2, generator=gen, dtype=torch.float64) * 100,
    )
    y = (
        (torch.rand(2, 1, 8, 8, generator=gen, dtype=torch.float64) * 2 - 1),
        torch.rand(2, generator=gen, dtype=torch.float64) * 100,
    )
    return cfg, state, pred, x, y


def fd_check(loss_fn, params, h=1e-5):
    """Central finite differences against autograd, per parameter.

    Returns the worst (abs_err, scale) pair over all parameters; a parameter
    passes when abs_err <= 1e-7 + 1e-4 * scale.
    """
    total = loss_fn()
    grads = torch.autograd.grad(total, params, allow_unused=False)
    worst = (0.0, 0.0, 0.0)
    for param, grad in zip(params, grads):
        flat = param.data.view(-1)
        gflat = grad.reshape(-1)
        for idx in range(flat.numel()):
            orig = float(flat[idx])
            flat[idx] = orig + h
            up = float(loss_fn().detach())
            flat[idx] = orig - h
            down = float(loss_fn().detach())
            flat[idx] = orig
            fd = (up - down) / (2 * h)
            an = float(gflat[idx])
            err = abs(an - fd)
            scale = max(abs(an), abs(fd))
            if err - 1e-4 * scale > worst[0] - 1e-4 * worst[1]:
                worst = (err, scale, err / max(scale, 1e-12))
    return worst


def test_criterion_1_gradient_suite():
    started = time.perf_counter()
    cfg, state, pred, x, y = tiny_setup()
    for net in state.networks().values():
        assert count_parameters(net) <= 2000
    assert count_parameters(pred) <= 2000

    checks = {}
    gen_params = list(state.gen_s2t.parameters())
    disc_t_params = list(state.disc_tgt.parameters())
    checks["adv_loss_generator"] = fd_check(
        lambda: adv_loss_generator(state.disc_tgt, state.gen_s2t(y[0])),
        gen_params + disc_t_params,
    )
    fixed_fake = (torch.rand(2, 1, 8, 8, dtype=torch.float64) * 2 - 1)
    checks["adv_loss_discriminator"] = fd_check(
        lambda: adv_loss_discriminator(state.disc_tgt, x[0], fixed_fake),
        disc_t_params,
    )
    both_gens = gen_params + list(state.gen_t2s.parameters())
    checks["cycle_loss"] = fd_check(
        lambda: cycle_loss(state.gen_s2t, state.gen_t2s, x[0], y[0]),
        both_gens,
    )
    checks["prediction_loss"] = fd_check(
        lambda: prediction_loss(pred, state.gen_s2t, y, x),
        gen_params + list(pred.parameters()),
    )
    all_params = [p for net in state.networks().values() for p in net.parameters()]
    all_params += list(pred.parameters())
    checks["joint_loss"] = fd_check(
        lambda: joint_loss(state, pred, x, y, cfg)[0],
        all_params,
    )

    elapsed = time.perf_counter() - started
    failures = {
        name: w for name, w in checks.items() if w[0] > 1e-7 + 1e-4 * w[1]
    }
    detail = (
        f"{sum(1 for _ in checks)} losses checked, worst rel err "
        f"{max(w[2] for w in checks.values()):.2e}, runtime {elapsed:.1f}s"
    )
    report(1, "gradient suite", not failures and elapsed < 60.0, detail)


def test_criterion_2_coupling():
    cfg, state, pred, x, y = tiny_setup(seed=GRAD_SEED + 7)
    coupled = cfg.lambda_pred * prediction_loss(pred, state.gen_s2t, y, x)
    grads = torch.autograd.grad(coupled, list(state.gen_s2t.parameters()))
    grad_norm = math.sqrt(sum(float((g ** 2).sum()) for g in grads))

    zero_cfg = TrainConfig(**{**cfg.__dict__, "lambda_pred": 0.0})
    gen = torch.Generator().manual_seed(99)
    max_gap = 0.0
    for _ in range(100):
        xb = (torch.rand(1, 1, 8, 8, generator=gen, dtype=torch.float64) * 2 - 1, torch.rand(1, generator=gen, dtype=torch.float64))
        yb = (torch.rand(1, 1, 8, 8, generator=gen, dtype=torch.float64) * 2 - 1, torch.rand(1, generator=gen, dtype=torch.float64))
        total_joint, _ = joint_loss(state, pred, xb, yb, zero_cfg)
        total_trans, _ = translation_loss(state, xb[0], yb[0])
        max_gap = max(max_gap, abs(float(total_joint.detach()) - float(total_trans.detach())))
    ok = grad_norm > 1e-6 and max_gap <= 1e-12
    report(2, "prediction-translation coupling", ok,
           f"grad norm through generator {grad_norm:.3e}, max |joint-translation| at lambda=0: {max_gap:.2e}")


# ---------------------------------------------------------------------------
# desk-scale trend experiment (criteria 3 and 4)
# ---------------------------------------------------------------------------

TREND_TASK = SyntheticTaskSpec(
    n_source=2000, n_target=700, resolution=(64, 64), noise_std=0.05, seed=20260810,
)
TREND_SPLIT = SplitSpec(0.715, 0.142, 0.143, seed=0, counts=(500, 100, 100))
TREND_CFG = TrainConfig(
    lambda_pred=1.0,
    lambda_cyc=10.0,
    lr_translator=1e-3,
    lr_predictor=2e-3,
    total_epochs=8,
    decay_start_epoch=4,
    batch_size=25,
    seed=77,
    n_runs=5,
    gen_base=8,
    gen_blocks=1,
    gen_stem_kernel=3,
    gen_global_skip=True,
    disc_base=4,
    disc_layers=2,
    pred_base=8,
    pred_blocks=3,
)
TREND_BUDGET_SEC = 30 * 60


@pytest.fixture(scope="module")
def trend_reports(tmp_path_factory):
    out_root = tmp_path_factory.mktemp("trend_runs")
    source, target = generate_synthetic_task(TREND_TASK)
    started = time.perf_counter()
    reports = {}
    for method in ("ours", "pure", "cyclegan"):
        reports[method] = run_experiment(
            TREND_CFG, source, target, TREND_SPLIT, method=method,
            out_root=out_root, jobs=2,
        )
    reports["wall_clock"] = time.perf_counter() - started
    return reports


def test_criterion_3_mix_vs_pure_trend(trend_reports):
    ours = trend_reports["ours"]
    pure = trend_reports["pure"]
    wall = trend_reports["wall_clock"]
    ok = (
        ours.mean < pure.mean
        and ours.mean <= 0.9 * pure.mean
        and ours.std <= pure.std
        and wall < TREND_BUDGET_SEC
    )
    report(3, "desk-scale mix-vs-pure trend", ok,
           f"mix mean {ours.mean:.2f} std {ours.std:.2f} vs pure mean {pure.mean:.2f} "
           f"std {pure.std:.2f} over {TREND_CFG.n_runs} seeds, wall {wall:.0f}s")


def test_criterion_4_ours_vs_two_stage(trend_reports):
    ours = trend_reports["ours"]
    cyclegan = trend_reports["cyclegan"]
    ok = ours.mean <= cyclegan.mean
    report(4, "joint vs two-stage trend", ok,
           f"ours mean {ours.mean:.2f} vs two-stage cyclegan mean {cyclegan.mean:.2f}")


# ---------------------------------------------------------------------------
# metric oracles
# ---------------------------------------------------------------------------


def test_criterion_5_metric_oracles():
    import mpmath

    rng = np.random.default_rng(12345)
    details = []

    feats = rng.normal(size=(256, 8))
    fid_same = fid_from_features(feats, feats)
    ok_same = abs(fid_same) <= 1e-6
    details.append(f"fid(A,A)={fid_same:.2e}")

    d = 4
    a = rng.normal(size=(10_000, d))
    b = rng.normal(size=(10_000, d))
    b[:, 0] += 1.0
    fid_gauss = fid_from_features(a, b)
    ok_gauss = abs(fid_gauss - 1.0) <= 0.05
    details.append(f"gaussian fid={fid_gauss:.4f} (target 1.0 +-5%)")

    flat = np.tile(np.array([[0.125] * 8]), (40, 1))
    is_flat, _ = inception_score_from_probs(flat, n_splits=1)
    ok_flat = abs(is_flat - 1.0) <= 1e-9
    k = 8
    onehot = np.tile(np.eye(k), (5, 1))
    is_onehot, _ = inception_score_from_probs(onehot, n_splits=1)
    ok_onehot = abs(is_onehot - k) <= 1e-9
    details.append(f"IS(identical)={is_flat:.12f}, IS(one-hot)={is_onehot:.12f} (K={k})")

    mpmath.mp.dps = 50
    ok_sqrt = True
    worst_sqrt = 0.0
    for d in (2, 3, 4, 5):
        root_a = rng.normal(size=(d, d))
        root_b = rng.normal(size=(d, d))
        cov_a = root_a @ root_a.T
        cov_b = root_b @ root_b.T
        got = matrix_sqrt_product(cov_a, cov_b)

        def mp_sqrtm(mat):
            evals, evecs = mpmath.mp.eigsy(mpmath.matrix(mat.tolist()))
            return evecs * mpmath.diag([mpmath.sqrt(max(v, mpmath.mpf(0))) for v in evals]) * evecs.T

        root = mp_sqrtm(cov_a)
        inner = root * mpmath.matrix(cov_b.tolist()) * root
        inner = (inner + inner.T) / 2
        evals, _ = mpmath.mp.eigsy(inner)
        oracle = float(sum(mpmath.sqrt(max(v, mpmath.mpf(0))) for v in evals))
        err = abs(got - oracle)
        worst_sqrt = max(worst_sqrt, err)
        ok_sqrt = ok_sqrt and err <= 1e-8
    details.append(f"matrix sqrt worst abs err {worst_sqrt:.2e}")

    report(5, "metric oracles", ok_same and ok_gauss and ok_flat and ok_onehot and ok_sqrt,
           "; ".join(details))


# ---------------------------------------------------------------------------
# schedule, protocol, buffer, baseline contracts
# ---------------------------------------------------------------------------


def test_criterion_6_schedule_and_protocol():
    cfg = TrainConfig()  # paper defaults: lr 2e-4, decay from 100, 200 epochs
    lr_head = {epoch: lr_at(epoch, 0.0002, cfg) for epoch in range(0, 101)}
    ok_head = all(v == 0.0002 for v in lr_head.values())
    lr_150 = lr_at(150, 0.0002, cfg)
    ok_mid = abs(lr_150 - 0.0001) <= 1e-18

    mean, std = aggregate([70.0, 80.0, 90.0])
    ok_agg = mean == 80.0 and abs(std - 10.0) <= 1e-12

    images = tuple(
        LabeledImage(np.zeros((8, 8, 1), dtype=np.float32), float(i), "ct", f"i{i:05d}")
        for i in range(2438)
    )
    ds = ModalityDataset(images, "ct")
    spec = SplitSpec(0.774, 0.111, 0.115, seed=13, counts=(1887, 271, 280))
    train, val, test = split_dataset(ds, spec)
    sizes = (len(train), len(val), len(test))
    ok_split = sizes == (1887, 271, 280)

    report(6, "schedule and protocol", ok_head and ok_mid and ok_agg and ok_split,
           f"lr epochs 0-100 = 0.0002, lr(150)={lr_150:.6f}, aggregate(70,80,90)=({mean},{std}), "
           f"split sizes {sizes}")


def test_criterion_7_buffer_statistics():
    buf = ImageBuffer(capacity=50)
    rng = random.Random(4242)
    for i in range(50):
        buf.query(torch.full((1, 2, 2), float(i)), rng)
    history_returns = 0
    capacity_ok = True
    n = 10_000
    for i in range(n):
        fresh = torch.full((1, 2, 2), float(1000 + i))
        out = buf.query(fresh, rng)
        if float(out[0, 0, 0]) != 1000.0 + i:
            history_returns += 1
        capacity_ok = capacity_ok and len(buf) <= 50
    fraction = history_returns / n
    ok = 0.48 <= fraction <= 0.52 and capacity_ok
    report(7, "replay buffer statistics", ok,
           f"history-return fraction {fraction:.4f} over {n} queries, capacity bounded: {capacity_ok}")


def test_criterion_8_baseline_contracts():
    details = []

    # gradient reversal against finite differences: upstream parameter grads
    # equal -scale times the gradient of the same loss with the layer removed
    torch.manual_seed(31)
    pre = torch.nn.Linear(4, 3).double()
    post = torch.nn.Linear(3, 1).double()
    grl = GradientReversal(scale=1.0)
    inp = torch.rand(5, 4, dtype=torch.float64)

    def loss_with_grl():
        return post(grl(pre(inp))).pow(2).mean()

    def loss_without():
        return post(pre(inp)).pow(2).mean()

    params = list(pre.parameters())
    analytic = torch.autograd.grad(loss_with_grl(), params)
    h = 1e-6
    ok_grl = True
    worst = 0.0
    for param, grad in zip(params, analytic):
        flat = param.data.view(-1)
        gflat = grad.reshape(-1)
        for idx in range(flat.numel()):
            orig = float(flat[idx])
            flat[idx] = orig + h
            up = float(loss_without().detach())
            flat[idx] = orig - h
            down = float(loss_without().detach())
            flat[idx] = orig
            fd = (up - down) / (2 * h)
            err = abs(float(gflat[idx]) + fd)  # analytic must equal -fd
            worst = max(worst, err)
            ok_grl = ok_grl and err <= 1e-7 + 1e-4 * abs(fd)
    details.append(f"GRL negation worst abs err {worst:.2e}")

    # transfer learning phase boundary is bytewise
    cfg = TrainConfig(
        total_epochs=1, decay_start_epoch=1, batch_size=4, n_runs=1,
        gen_base=2, gen_blocks=1, gen_stem_kernel=3, disc_base=2, disc_layers=1,
        pred_base=4, pred_blocks=2,
    )
    rng = np.random.default_rng(0)

    def mk(n, modality):
        return ModalityDataset(tuple(
            LabeledImage(rng.uniform(-1, 1, (8, 8, 1)).astype(np.float32),
                         float(rng.uniform(0, 100)), modality, f"{modality}{i}")
            for i in range(n)
        ), modality)

    out = train_transfer(cfg, mk(6, "source"), mk(6, "target"), run_seed=3)
    ok_tl = all(
        torch.equal(out.extras["phase1_final"][k], out.extras["phase2_init"][k])
        for k in out.extras["phase1_final"]
    )
    details.append(f"TL phase-2 init bytewise equals phase-1 final: {ok_tl}")

    # augmenters preserve labels and value range on 1000 random images
    aug_rng = np.random.default_rng(77)
    ok_aug = True
    for i in range(1000):
        img = LabeledImage(
            aug_rng.uniform(-1, 1, (16, 16, 1)).astype(np.float32),
            float(aug_rng.uniform(0, 100)), "m", f"r{i}",
        )
        simple = augment_simple(img, SIMPLE_AUGMENT, aug_rng)
        erased = augment_random_erasing(img, RANDOM_ERASING, aug_rng)
        for res in (simple, erased):
            ok_aug = ok_aug and res.label == img.label
            ok_aug = ok_aug and res.pixels.min() >= -1.0 and res.pixels.max() <= 1.0
    details.append("augmenters preserved labels and [-1,1] range on 1000 images")

    report(8, "baseline contracts", ok_grl and ok_tl and ok_aug, "; ".join(details))
