import numpy as np
import pytest

from macc import wae
from macc.autodiff import Tensor
from macc.inverse import build_inverse
from macc.surrogate import (
    build_baseline,
    build_surrogate,
    cycle_penalty,
    encode_targets,
    param_count,
    predict_outputs,
    surrogate_loss,
    train_baseline,
    train_surrogate,
)


@pytest.fixture(scope="module")
def stack():
    enc, dec, _ = wae.build_wae(8, 16, 4, 8, seed=31)
    inv = build_inverse(16, 4, 8, seed=32)
    sur = build_surrogate(5, 8, seed=33)
    return enc, dec, inv, sur


def test_predict_outputs_is_decode_of_forward(stack):
    _, dec, _, sur = stack
    x = np.random.default_rng(0).uniform(size=(4, 5))
    img, sca = predict_outputs(sur, dec, x)
    img2, sca2 = dec.decode(sur.predict(x))
    np.testing.assert_array_equal(img, img2)
    np.testing.assert_array_equal(sca, sca2)
    z = sur.predict(x)
    assert (np.abs(z) <= 1.0).all()


def test_cycle_penalty_oracle_and_additivity(stack):
    _, dec, inv, sur = stack
    rng = np.random.default_rng(1)
    x = rng.uniform(size=(5, 5))
    z = rng.uniform(-1, 1, size=(5, 8))
    pen = cycle_penalty(x, z, sur, inv, dec)

    # stepwise oracle
    rimg, rsca = dec.decode(z)
    zcyc = sur.predict(inv.predict(rimg, rsca))
    pimg, psca = dec.decode(sur.predict(x))
    xcyc = inv.predict(pimg, psca)
    assert pen.latent_sum == pytest.approx(((z - zcyc) ** 2).sum(), rel=1e-12)
    assert pen.input_sum == pytest.approx(((x - xcyc) ** 2).sum(), rel=1e-12)
    assert pen.total == pytest.approx(pen.latent_sum + pen.input_sum, abs=1e-12)

    # duplicating the batch doubles the summed penalty
    pen2 = cycle_penalty(np.vstack([x, x]), np.vstack([z, z]), sur, inv, dec)
    assert pen2.total == pytest.approx(2.0 * pen.total, rel=1e-12)


def test_cycle_penalty_empty_batch(stack):
    _, dec, inv, sur = stack
    with pytest.raises(ValueError, match="empty"):
        cycle_penalty(np.zeros((0, 5)), np.zeros((0, 8)), sur, inv, dec)


def test_surrogate_loss_decomposition(stack):
    _, dec, inv, sur = stack
    rng = np.random.default_rng(2)
    x = Tensor(rng.uniform(size=(6, 5)))
    z = Tensor(rng.uniform(-1, 1, size=(6, 8)))
    lam = 0.05
    (reg, latent, inputc), total = surrogate_loss(sur, inv, dec, x, z, lam)
    assert total.item() == pytest.approx(reg + lam * (latent + inputc), abs=1e-10)

    # independent recomputation of each term
    zhat = sur.predict(x.data)
    assert reg == pytest.approx(((zhat - z.data) ** 2).mean(), rel=1e-12)
    pen = cycle_penalty(x.data, z.data, sur, inv, dec)
    assert latent == pytest.approx(pen.latent_mean, rel=1e-12)
    assert inputc == pytest.approx(pen.input_mean, rel=1e-12)


def test_surrogate_loss_lambda_zero_is_regression(stack):
    _, dec, inv, sur = stack
    rng = np.random.default_rng(3)
    x = Tensor(rng.uniform(size=(4, 5)))
    z = Tensor(rng.uniform(-1, 1, size=(4, 8)))
    (reg, latent, inputc), total = surrogate_loss(sur, inv, dec, x, z, 0.0)
    assert latent == 0.0 and inputc == 0.0
    assert total.item() == pytest.approx(reg, abs=1e-14)


def test_gradient_isolation_during_updates(stack, tiny_dataset):
    train, val = tiny_dataset
    enc, dec, _, _ = (*stack[:2], None, None)
    inv = build_inverse(16, 4, 8, seed=35)
    dec_before = [p.data.copy() for p in dec.params()]
    enc_before = [p.data.copy() for p in enc.params()]
    sur, inv, _ = train_surrogate(train, val, enc, dec, inv, lambda_cyc=0.05,
                                  epochs=1, batch_size=16, lr=1e-3, seed=36)
    for before, p in zip(dec_before, dec.params()):
        np.testing.assert_array_equal(before, p.data)  # decoder frozen, bitwise
    for before, p in zip(enc_before, enc.params()):
        np.testing.assert_array_equal(before, p.data)


def test_train_surrogate_deterministic(tiny_dataset):
    train, val = tiny_dataset
    enc, dec, _ = wae.build_wae(8, 16, 4, 8, seed=40)

    def run():
        inv = build_inverse(16, 4, 8, seed=41)
        sur, _, log = train_surrogate(train, val, enc, dec, inv,
                                      lambda_cyc=0.05, epochs=2,
                                      batch_size=16, lr=1e-3, seed=42)
        return [p.data.copy() for p in sur.params()], log

    p1, log1 = run()
    p2, log2 = run()
    assert log1 == log2
    for a, b in zip(p1, p2):
        np.testing.assert_array_equal(a, b)


def test_train_surrogate_rejects_negative_lambda(stack, tiny_dataset):
    train, val = tiny_dataset
    enc, dec, inv, _ = stack
    with pytest.raises(ValueError, match="lambda_cyc"):
        train_surrogate(train, val, enc, dec, inv, lambda_cyc=-1.0, epochs=1)


def test_baseline_parameter_count_matches_macc_path():
    sur, head = build_baseline(5, 8, 16, 4, 8, seed=50)
    macc_sur = build_surrogate(5, 8, seed=51)
    macc_dec = wae.Decoder(8, 16, 4, 8, rng=np.random.Generator(np.random.PCG64(52)))
    assert param_count(sur, head) == param_count(macc_sur, macc_dec)


def test_baseline_beats_mean_predictor(tiny_dataset):
    train, val = tiny_dataset
    from macc.simulator import normalize
    sur, head, log = train_baseline(train, val, latent_dim=8, epochs=80,
                                    batch_size=16, lr=1e-3, seed=53)
    va_img, _ = normalize(val.images, val.scalars, val.stats)
    tr_img, _ = normalize(train.images, train.scalars, train.stats)
    pred_img, _ = predict_outputs(sur, head, val.x)
    model_mse = ((pred_img - va_img) ** 2).mean()
    mean_mse = ((tr_img.mean(axis=0) - va_img) ** 2).mean()
    assert model_mse < mean_mse
