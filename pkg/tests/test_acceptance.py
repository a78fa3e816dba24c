"""Acceptance suite: one test per primary criterion, each printing a PASS/FAIL line.

The training criteria share one cache of desk-scale two-stage runs, so the
smoke, ablation and zero-shot checks train each (row, seed) pair once. The
whole module takes roughly half an hour on a single core.
"""
import time
import warnings

import numpy as np
import pytest
from metric_oracles import dice_iou_oracle, e_measure_oracle, half_plane_fixture, s_measure_oracle, weighted_f_oracle
from test_losses import loop_oracle

from smamba.config import GenSpec, ModelConfig, TrainConfig, tiny_model_config
from smamba.data import gen_synthetic
from smamba.encoder import vit_forward
from smamba.experiments import ABLATION_ROWS, count_violations, median, two_stage_run
from smamba.losses import LossConfig, combined_loss, weighted_bce, weighted_dice
from smamba.metrics import THRESHOLDS, dice_iou_curves, e_measure_max, s_measure, weighted_fmeasure
from smamba.model import SamMamba, encoder_forward, normalize_image
from smamba.prior import MambaPrior, fuse, mamba_prior_forward, msd
from smamba.ssm import scan_chunked, scan_sequential
from smamba.tensor import Tensor, default_dtype
from smamba.train import Trainer, build_model
from smamba.verify import MODULES, run_gradcheck

SEEDS = (0, 1, 2)
_runs = {}


def desk_run(row, seed):
    if (row, seed) not in _runs:
        _runs[row, seed] = two_stage_run(row, seed)
    return _runs[row, seed]


@pytest.fixture
def verdict(capsys):
    def report(name, ok, detail, gating=True):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'} {name}: {detail}")
        if gating:
            assert ok, detail

    return report


def test_gradient_fidelity(verdict):
    start = time.perf_counter()
    results = run_gradcheck(MODULES)
    seconds = time.perf_counter() - start
    worst = max(r.max_rel_error for r in results)
    detail = ", ".join(f"{r.module}={r.max_rel_error:.2e}" for r in results) + f"; {seconds:.1f}s"
    verdict("gradient fidelity", worst < 1e-4 and seconds < 60, detail)


def test_scan_equivalence(verdict):
    rng = np.random.default_rng(2024)
    worst, cases = 0.0, 0
    for _ in range(12):
        L, E, N = int(rng.integers(1, 129)), int(rng.integers(1, 9)), int(rng.integers(1, 9))
        u = rng.normal(size=(2, L, E))
        delta = rng.uniform(0.01, 1.0, size=(2, L, E))
        A = -np.exp(rng.normal(size=(E, N)))
        B, C, D = rng.normal(size=(2, L, N)), rng.normal(size=(2, L, N)), rng.normal(size=E)
        ref = scan_sequential(u, delta, A, B, C, D)[0]
        for chunk in (1, 2, 3, 7, L):
            worst = max(worst, float(np.abs(scan_chunked(u, delta, A, B, C, D, chunk)[0] - ref).max()))
            cases += 1
    verdict("scan equivalence", cases >= 50 and worst < 1e-10, f"{cases} cases, max abs diff {worst:.1e}")


def test_shape_and_identity_contracts(verdict):
    checks = {}
    with default_dtype(np.float64):
        cfg = ModelConfig(c0=2, dim=8, heads=2)
        prior = MambaPrior(np.random.default_rng(0), cfg)
        image = Tensor(np.random.default_rng(1).normal(size=(1, 16, 16, 3)))
        m_star = msd(image, prior)
        checks["M* is HxWx3C0"] = m_star.shape == (1, 16, 16, 6)
        checks["kernel order 7|5|3"] = [c.k for c in prior.convs] == [7, 5, 3]
        checks["M^D is HxWx6C0"] = mamba_prior_forward(image, prior).shape == (1, 16, 16, 12)
        ones = Tensor(np.ones((1, 6)))
        checks["unit gates duplicate"] = np.array_equal(fuse(m_star, ones, ones).data, np.concatenate([m_star.data] * 2, axis=-1))
        model = SamMamba(tiny_model_config())
        x = normalize_image(np.random.default_rng(2).uniform(size=(2, 16, 16, 3)))
        checks["zero gate equals backbone"] = np.array_equal(encoder_forward(x, model).embeddings.data, vit_forward(x, model.backbone).data)
    failed = [k for k, ok in checks.items() if not ok]
    verdict("shape/identity contracts", not failed, f"{len(checks) - len(failed)}/{len(checks)} hold" + (f"; failed {failed}" if failed else ""))


def test_freeze_ledger(verdict):
    run = desk_run("full", 0)
    verdict(
        "freeze ledger",
        run.decoder_frozen_stage1 and run.backbone_frozen,
        f"decoder untouched by stage 1: {run.decoder_frozen_stage1}; backbone untouched by both stages: {run.backbone_frozen}",
    )


def test_metric_oracles(verdict):
    problems = []
    rng = np.random.default_rng(8)
    for case in range(100):
        gt = (rng.uniform(size=(8, 8)) < rng.uniform(0.1, 0.9)).astype(int)
        pred = np.round(rng.uniform(size=(8, 8)) * 255) / 255
        dice, iou = dice_iou_curves(pred, gt)
        for t in range(256):
            if (dice[t], iou[t]) != dice_iou_oracle(pred.tolist(), gt.tolist(), THRESHOLDS[t]):
                problems.append(f"counting case {case} t={t}")
        if np.abs(iou - dice / (2 - dice)).max() > 1e-12:
            problems.append(f"IoU identity case {case}")
    gt = half_plane_fixture()[1]
    exact = gt.astype(float)
    zeros = np.zeros((6, 6), int)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        degenerate = {
            "S(G,G)": (s_measure(exact, gt), 1.0),
            "Fbw(G,G)": (weighted_fmeasure(exact, gt), 1.0),
            "Emax(G,G)": (e_measure_max(exact, gt), 1.0),
            "S empty G, empty P": (s_measure(np.zeros((6, 6)), zeros), 1.0),
            "S empty G, full P": (s_measure(np.ones((6, 6)), zeros), 0.0),
            "Fbw empty G": (weighted_fmeasure(np.zeros((6, 6)), zeros), 0.0),
        }
    problems += [k for k, (got, want) in degenerate.items() if abs(got - want) > 1e-9]
    pred, gt = half_plane_fixture()
    golden = {
        "S golden": (s_measure(pred, gt), s_measure_oracle(pred.tolist(), gt.tolist())),
        "Fbw golden": (weighted_fmeasure(pred, gt), weighted_f_oracle(pred.tolist(), gt.tolist())),
        "Emax golden": (e_measure_max(pred, gt), e_measure_oracle(pred.tolist(), gt.tolist())),
    }
    problems += [k for k, (got, want) in golden.items() if abs(got - want) > 1e-6]
    verdict("metric oracles", not problems, "all match" if not problems else f"{len(problems)} mismatches, first: {problems[:3]}")


def test_loss_contracts(verdict):
    with default_dtype(np.float64):
        g = np.zeros((16, 16))
        g[4:12, 3:10] = 1.0
        perfect = float(combined_loss(Tensor(np.where(g == 1, 30.0, -30.0)), g, LossConfig()).data)
        rng = np.random.default_rng(5)
        worst = 0.0
        for _ in range(20):
            x = rng.normal(0, 2, size=(8, 8))
            gt = (rng.uniform(size=(8, 8)) > 0.5).astype(float)
            w = np.ones((8, 8))
            bce, dice = loop_oracle(x, gt, w)
            worst = max(worst, abs(float(weighted_bce(Tensor(x), gt, w).data) - bce))
            worst = max(worst, abs(float(weighted_dice(Tensor(1 / (1 + np.exp(-x))), gt, w).data) - dice))
    floor = 1e-3 + np.finfo(np.float64).eps
    verdict("loss contracts", perfect < floor and worst < 1e-8, f"perfect loss {perfect:.2e}; unit-weight oracle diff {worst:.1e}")


def test_training_smoke(verdict):
    runs = [desk_run("full", s) for s in SEEDS]
    violations = [count_violations(r.stage1_epoch_loss) for r in runs]
    slowest = max(r.seconds for r in runs)
    before = median([r.mdice_stage1 for r in runs])
    after = median([r.mdice_stage2 for r in runs])
    ok = max(violations) <= 1 and after >= before and slowest < 600
    verdict(
        "training smoke",
        ok,
        f"stage-1 violations per seed {violations}; median mDice {before:.3f} -> {after:.3f}; slowest run {slowest:.0f}s",
    )


def test_ablation_direction(verdict):
    runs = {row: [desk_run(row, s) for s in SEEDS] for row in ABLATION_ROWS}
    score = {row: median([r.mdice_stage2 for r in rs]) for row, rs in runs.items()}
    seconds = sum(r.seconds for rs in runs.values() for r in rs)
    ok = score["full"] >= score["msd"] >= score["adapter"]
    ok = ok and all(score["full"] >= score[u] for u in ("uni3", "uni5", "uni7"))
    detail = " ".join(f"{row}={score[row]:.3f}" for row in ABLATION_ROWS) + f"; {seconds / 60:.1f} min"
    detail += "; per seed " + " ".join(f"{row}[{','.join(f'{r.mdice_stage2:.3f}' for r in rs)}]" for row, rs in runs.items())
    verdict("ablation direction", ok and seconds < 45 * 60, detail)


def test_zero_shot_analog(verdict):
    def drop(row):
        return median([r.mdice_stage2 - r.mdice_unseen for r in (desk_run(row, s) for s in SEEDS)])

    full, adapter = drop("full"), drop("adapter")
    ok = full <= adapter
    if not ok:
        warnings.warn(f"full config drops {full:.3f} on the unseen split, adapter-only drops {adapter:.3f}")
    verdict("zero-shot analog (non-gating)", ok, f"median drop full {full:.3f} vs adapter {adapter:.3f}", gating=False)


def test_determinism(verdict):
    data = gen_synthetic(GenSpec(n=8, size=32), 4)
    cfg = TrainConfig(lr=1e-3, epochs_stage1=2, epochs_stage2=2, batch=2, seed=9, precision="64")

    def loss_tsv():
        trainer = Trainer(build_model(tiny_model_config(), cfg), data, cfg)
        trainer.run()
        return trainer.loss_tsv()

    a, b = loss_tsv(), loss_tsv()
    verdict("determinism", a == b and a.count("\n") > 1, f"{a.count(chr(10)) - 1} loss rows, identical: {a == b}")
