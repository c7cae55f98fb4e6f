"""End-to-end acceptance gate.

Trains the full desk-scale configuration once (shared session fixtures) and
checks every release criterion: gradient correctness, sampling stratification,
exact loss decompositions, reconstruction quality bounds, paired-seed trend
comparisons for the cycle penalty, determinism, and the wall-clock budget.
Each criterion is one test; the -v line is its pass/fail record and a
CRITERION line is printed with the measured numbers.

Slow: expect well over an hour on a single CPU core.
"""

import copy
import csv
import json
import os
import time

import numpy as np
import pytest

from macc import autodiff as ad
from macc import evaluation, inverse as inv_mod, nn, simulator, surrogate as sur_mod, wae as wae_mod
from macc.cli import main
from macc.config import ExperimentConfig, stage_seed

from helpers import check_gradients

SEEDS = (0, 1, 2)
LAM = 0.05
ARM_PRETRAIN_EPOCHS = 100
ARM_SURROGATE_EPOCHS = 60
ARM_BASELINE_EPOCHS = 60


def _verdict(num, name, ok, detail):
    line = f"CRITERION {num:>2} {name}: {'PASS' if ok else 'FAIL'} ({detail})"
    print(line, flush=True)
    assert ok, line


# --------------------------------------------------------- shared fixtures

@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    """Full default pipeline via the CLI, timed per stage."""
    out = str(tmp_path_factory.mktemp("desk") / "runs")
    walls = {}
    total0 = time.perf_counter()
    for cmd in ("generate-data", "train-ae", "train-inverse",
                "train-surrogate", "evaluate", "scan-test", "perturb-test"):
        t0 = time.perf_counter()
        assert main([cmd, "--seed", "0", "--out", out]) == 0, f"{cmd} failed"
        walls[cmd] = time.perf_counter() - t0
    walls["total"] = time.perf_counter() - total0
    return out, walls


@pytest.fixture(scope="session")
def desk_data(desk_run):
    out, _ = desk_run
    train = simulator.load_dataset(os.path.join(out, "train.ds"), split="train")
    val = simulator.load_dataset(os.path.join(out, "val.ds"), split="val")
    return train, val


@pytest.fixture(scope="session")
def desk_wae(desk_run):
    out, _ = desk_run
    cfg = ExperimentConfig()
    enc = wae_mod.Encoder(cfg.latent_dim, cfg.image_size, cfg.n_band, cfg.n_sca)
    dec = wae_mod.Decoder(cfg.latent_dim, cfg.image_size, cfg.n_band, cfg.n_sca)
    nn.load_checkpoint(os.path.join(out, "ae_encoder.ckpt"), enc.layers())
    nn.load_checkpoint(os.path.join(out, "ae_decoder.ckpt"), dec.layers())
    return enc, dec


@pytest.fixture(scope="session")
def desk_ensemble(desk_run):
    out, _ = desk_run
    cfg = ExperimentConfig()
    manifest = os.path.join(out, "ensemble", "ensemble_manifest.txt")
    return inv_mod.load_ensemble(manifest, cfg.image_size, cfg.n_band, cfg.n_sca)


@pytest.fixture(scope="session")
def arms(desk_data, desk_wae, desk_ensemble):
    """Paired-seed surrogate arms: lambda 0 vs 0.05 (plus 10 for the underfit
    check), baselines, and the small-data arms at fraction 0.25.  Both lambda
    arms of a seed share the same pre-trained inverse warm start and the same
    held-out ensemble, so every comparison is paired."""
    train, val = desk_data
    enc, dec = desk_wae
    members = desk_ensemble
    scan_sets = evaluation.make_scan_sets(stage_seed(0, "eval"), bases_per_dim=20)
    t0 = time.perf_counter()
    out = {"full": {}, "baseline": {}, "small": {}}

    for s in SEEDS:
        inv0, _ = inv_mod.pretrain_inverse(train, val, epochs=ARM_PRETRAIN_EPOCHS,
                                           patience=30, seed=stage_seed(s, "inverse"))
        for lam in (0.0, LAM) + ((10.0,) if s == 0 else ()):
            sur, _, slog = sur_mod.train_surrogate(
                train, val, enc, dec, copy.deepcopy(inv0), lambda_cyc=lam,
                epochs=ARM_SURROGATE_EPOCHS, seed=stage_seed(s, "surrogate"))
            cons = evaluation.consistency_score(sur, dec, members, scan_sets)
            sens = evaluation.perturbation_test(sur, dec, val, 0.1,
                                                stage_seed(s, "eval"))
            bands = evaluation.mse_per_band(sur, dec, val)
            out["full"][(s, lam)] = {
                "consistency_mean": cons.score_mean,
                "consistency_sum": cons.score_sum,
                "sensitivity": sens,
                "img_mse": float(np.mean([m for m, _ in bands])),
                "val_reg": slog[-1][6],
                "surrogate": sur,
            }
        bs, bh, _ = sur_mod.train_baseline(train, val, latent_dim=32,
                                           epochs=ARM_BASELINE_EPOCHS,
                                           seed=stage_seed(s, "baseline"))
        bb = evaluation.mse_per_band(bs, bh, val)
        out["baseline"][s] = float(np.mean([m for m, _ in bb]))

    # small-data arms: 25% of the train split, full-data autoencoder
    k = train.n // 4
    subset_rng = np.random.Generator(np.random.PCG64(10_000 + 250))
    subset = np.sort(subset_rng.permutation(train.n)[:k])
    for s in SEEDS:
        invs, _ = inv_mod.pretrain_inverse(train, val, epochs=ARM_PRETRAIN_EPOCHS,
                                           patience=30, seed=stage_seed(s, "sweep"),
                                           subset=subset)
        for lam in (0.0, LAM):
            sur, _, _ = sur_mod.train_surrogate(
                train, val, enc, dec, copy.deepcopy(invs), lambda_cyc=lam,
                epochs=ARM_SURROGATE_EPOCHS, seed=stage_seed(s, "sweep") + 1,
                subset=subset)
            bands = evaluation.mse_per_band(sur, dec, val)
            out["small"][(s, lam)] = float(np.mean([m for m, _ in bands]))

    out["wall"] = time.perf_counter() - t0
    return out


# -------------------------------------------------------------- criterion 1

def test_criterion_01_gradient_correctness():
    rng = np.random.Generator(np.random.PCG64(7))
    t0 = time.perf_counter()

    def tensors(*shapes):
        return [ad.Tensor(rng.normal(size=s), requires_grad=True) for s in shapes]

    for trial in range(20):
        # dense
        x, w, b = tensors((3, 4), (4, 2), (2,))
        check_gradients(lambda x=x, w=w, b=b: ad.mse(ad.add(ad.matmul(x, w), b),
                                                     np.zeros((3, 2))), [x, w, b])
        # conv + tconv
        x, k, b = tensors((2, 2, 5, 5), (3, 2, 3, 3), (3,))
        check_gradients(lambda x=x, k=k, b=b: ad.mse(
            ad.conv2d(x, k, b, stride=2, pad=1), np.zeros((2, 3, 3, 3))), [x, k, b])
        x, k, b = tensors((2, 3, 3, 3), (3, 2, 3, 3), (2,))
        check_gradients(lambda x=x, k=k, b=b: ad.mse(
            ad.conv_transpose2d(x, k, b, stride=2, pad=1, out_pad=1),
            np.zeros((2, 2, 6, 6))), [x, k, b])
        # nonlinearities, reshape, concat
        x, y = tensors((4, 3), (4, 2))
        check_gradients(lambda x=x, y=y: ad.mse(
            ad.concat([ad.relu(x), ad.tanh(y)], axis=1), np.zeros((4, 5))), [x, y])
        x, = tensors((2, 6))
        check_gradients(lambda x=x: ad.mse(ad.reshape(ad.sigmoid(x), (2, 2, 3)),
                                           np.zeros((2, 2, 3))), [x])
        # all three loss kinds (fresh tensors: grads accumulate additively)
        tgt = rng.normal(size=(5, 4))
        x, = tensors((5, 4))
        check_gradients(lambda x=x: ad.mse(x, tgt), [x])
        x, = tensors((5, 4))
        check_gradients(lambda x=x: ad.sq_norm_mean(x, tgt), [x])
        p, = tensors((6, 1))
        labels = rng.integers(0, 2, size=(6, 1)).astype(np.float64)
        check_gradients(lambda p=p: ad.bce(ad.sigmoid(p), labels), [p])

    wall = time.perf_counter() - t0
    _verdict(1, "gradient correctness", wall < 60.0,
             f"20 trials x 8 checks, rel err < 1e-4, {wall:.1f}s")


# -------------------------------------------------------------- criterion 2

def test_criterion_02_lhs_stratification():
    t0 = time.perf_counter()
    cases = [(2, 1), (10, 2), (16, 3), (64, 5), (256, 8), (1024, 8)]
    for i, (n, d) in enumerate(cases):
        pts = simulator.lhs_sample(n, d, seed=100 + i)
        for j in range(d):
            bins = np.floor(pts[:, j] * n).astype(int)
            assert sorted(bins) == list(range(n)), (n, d, j)
    _verdict(2, "LHS stratification", True,
             f"one point per bin for {cases}, {time.perf_counter() - t0:.1f}s")


# -------------------------------------------------------------- criterion 3

def test_criterion_03_loss_decompositions():
    rng = np.random.Generator(np.random.PCG64(11))
    enc, dec, disc = wae_mod.build_wae(8, 16, 4, 8, seed=12)
    inv = inv_mod.build_inverse(16, 4, 8, seed=13)
    sur = sur_mod.build_surrogate(5, 8, seed=14)
    worst = 0.0
    for trial in range(10):
        img = ad.Tensor(rng.uniform(0, 1, (6, 4, 16, 16)))
        sca = ad.Tensor(rng.normal(size=(6, 8)))
        x = ad.Tensor(rng.uniform(0, 1, (6, 5)))
        z = ad.Tensor(rng.uniform(-1, 1, (6, 8)))
        gamma_s, gamma_a = 10.0 ** rng.uniform(-1, 2), 10.0 ** rng.uniform(-4, -1)
        lam = 10.0 ** rng.uniform(-2, 1)

        it, st, at, total = wae_mod.wae_loss(enc, dec, disc, img, sca,
                                             gamma_s=gamma_s, gamma_a=gamma_a)
        worst = max(worst, abs(float(total.data) - (float(it.data)
                                                    + gamma_s * float(st.data)
                                                    + gamma_a * float(at.data))))

        (reg, lc, ic), ftotal = sur_mod.surrogate_loss(sur, inv, dec, x, z,
                                                       lambda_cyc=lam)
        worst = max(worst, abs(float(ftotal.data) - (reg + lam * (lc + ic))))

        terms, _ = inv_mod.inverse_loss(inv, sur, dec, z, x, lambda_cyc=lam)
        worst = max(worst, abs(terms.total - (terms.regression
                                              + lam * terms.latent_cycle)))
    _verdict(3, "loss decompositions exact", worst < 1e-10,
             f"max |total - recomputed sum| = {worst:.2e} over 10 random batches")


# -------------------------------------------------------------- criterion 4

def test_criterion_04_wae_quality(desk_run, desk_data):
    out, walls = desk_run
    train, val = desk_data
    with open(os.path.join(out, "wae_log.csv")) as fh:
        rows = list(csv.DictReader(fh))
    val_img = float(rows[-1]["val_image_mse"])
    val_sca = float(rows[-1]["val_scalar_mse"])

    tr_img, tr_sca = simulator.normalize(train.images, train.scalars, train.stats)
    va_img, va_sca = simulator.normalize(val.images, val.scalars, val.stats)
    mean_pred_mse = float(((va_img - tr_img.mean(axis=0)) ** 2).mean())
    var_baseline = float(((va_sca - tr_sca.mean(axis=0)) ** 2).mean())

    ok = (val_img < 0.25 * mean_pred_mse and val_sca < 0.25 * var_baseline
          and walls["train-ae"] < 600.0)
    _verdict(4, "WAE quality", ok,
             f"val img {val_img:.6f} < {0.25 * mean_pred_mse:.6f}, "
             f"val sca {val_sca:.4f} < {0.25 * var_baseline:.4f}, "
             f"train-ae {walls['train-ae']:.0f}s < 600s")


# -------------------------------------------------------------- criterion 5

def test_criterion_05_consistency_trend(arms):
    wins = sum(arms["full"][(s, LAM)]["consistency_mean"]
               >= arms["full"][(s, 0.0)]["consistency_mean"] for s in SEEDS)
    pairs = [(round(arms["full"][(s, 0.0)]["consistency_mean"], 4),
              round(arms["full"][(s, LAM)]["consistency_mean"], 4)) for s in SEEDS]
    _verdict(5, "consistency trend", wins >= 2,
             f"{wins}/3 seeds, (lam=0, lam=0.05) mean scores {pairs}, "
             f"arm wall {arms['wall']:.0f}s")


# -------------------------------------------------------------- criterion 6

def test_criterion_06_robustness_trend(arms, desk_data, desk_wae):
    wins = sum(arms["full"][(s, LAM)]["sensitivity"]
               <= arms["full"][(s, 0.0)]["sensitivity"] for s in SEEDS)
    train, val = desk_data
    _, dec = desk_wae
    sur = arms["full"][(0, LAM)]["surrogate"]
    zero = evaluation.perturbation_test(sur, dec, val, 0.0, stage_seed(0, "eval"))
    pairs = [(f"{arms['full'][(s, 0.0)]['sensitivity']:.2e}",
              f"{arms['full'][(s, LAM)]['sensitivity']:.2e}") for s in SEEDS]
    _verdict(6, "robustness trend", wins >= 2 and zero == 0.0,
             f"{wins}/3 seeds, (lam=0, lam=0.05) sensitivities {pairs}, "
             f"sigma=0 sensitivity {zero}")


# -------------------------------------------------------------- criterion 7

def test_criterion_07_small_data_trend(arms):
    wins = sum(arms["small"][(s, LAM)] <= arms["small"][(s, 0.0)] for s in SEEDS)
    pairs = [(round(arms["small"][(s, 0.0)], 6), round(arms["small"][(s, LAM)], 6))
             for s in SEEDS]
    _verdict(7, "small-data trend", wins >= 2,
             f"{wins}/3 seeds at fraction 0.25, (lam=0, lam=0.05) val image MSE {pairs}")


# -------------------------------------------------------------- criterion 8

def test_criterion_08_baseline_direction(arms):
    wins = sum(arms["full"][(s, LAM)]["img_mse"] <= arms["baseline"][s]
               for s in SEEDS)
    pairs = [(round(arms["full"][(s, LAM)]["img_mse"], 6),
              round(arms["baseline"][s], 6)) for s in SEEDS]
    _verdict(8, "baseline direction", wins >= 2,
             f"{wins}/3 seeds, (surrogate, baseline) val image MSE {pairs}")


# -------------------------------------------------------------- criterion 9

def test_criterion_09_underfit_check(arms):
    hi = arms["full"][(0, 10.0)]["val_reg"]
    lo = arms["full"][(0, LAM)]["val_reg"]
    _verdict(9, "underfit check", hi > lo,
             f"lam=10 val regression MSE {hi:.6f} > lam=0.05 {lo:.6f}")


# ------------------------------------------------------------- criterion 10

TINY_CFG = """\
dataset.n_train = 32
dataset.n_val = 8
dataset.image_size = 16
wae.latent_dim = 8
wae.epochs = 3
wae.patience = 3
inverse.epochs = 3
inverse.n_members = 2
inverse.member_epochs = 3
surrogate.epochs = 3
surrogate.baseline_epochs = 3
eval.scan_bases = 1
eval.scan_steps = 20
eval.fractions = 0.5
eval.sweep_lambdas = 0.0,0.05
eval.sweep_seeds = 0
optimizer.batch_size = 8
"""


def test_criterion_10_determinism(tmp_path):
    cfg = tmp_path / "tiny.cfg"
    cfg.write_text(TINY_CFG)
    dirs = [str(tmp_path / "a"), str(tmp_path / "b")]
    stages = ("generate-data", "train-ae", "train-inverse", "train-surrogate",
              "train-baseline", "evaluate", "scan-test", "perturb-test", "sweep")
    for out in dirs:
        for cmd in stages:
            assert main([cmd, "--config", str(cfg), "--seed", "9",
                         "--out", out]) == 0, cmd
    compared = 0
    for root, _, files in os.walk(dirs[0]):
        for name in files:
            if not (name.endswith(".ckpt") or name.endswith(".csv")
                    or name.endswith(".ds") or name.endswith(".txt")):
                continue
            pa = os.path.join(root, name)
            pb = pa.replace(dirs[0], dirs[1], 1)
            assert open(pa, "rb").read() == open(pb, "rb").read(), pa
            compared += 1
    _verdict(10, "determinism", compared >= 15,
             f"{compared} checkpoints/reports bitwise identical across "
             f"reruns of all {len(stages)} stages")


# ------------------------------------------------------------- criterion 11

def test_criterion_11_end_to_end(desk_run):
    out, walls = desk_run
    per_stage = {k: round(v, 1) for k, v in walls.items() if k != "total"}
    for name in ("metrics", "scan_summary", "perturb"):
        assert any(f.startswith(name) for f in os.listdir(out)), name
    _verdict(11, "end-to-end pipeline", walls["total"] < 45 * 60,
             f"{walls['total']:.0f}s total on 1 core (< 2700s), stages {per_stage}")
