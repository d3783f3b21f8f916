import csv
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from thermal_fall import training as tr
from thermal_fall.models import load_models
from thermal_fall.windows import SubVideoArrays, WindowSet

from helpers import GRAD_VARIANTS, generator_gradcheck, random_batch


# ---- individual losses -------------------------------------------------

def test_gan_loss_values():
    loss_d, loss_r = tr.gan_loss(np.array([0.9, 0.8]), np.array([0.1, 0.3]))
    assert loss_d == pytest.approx(-(np.log([0.9, 0.8]).mean() + np.log([0.9, 0.7]).mean()))
    assert loss_r == pytest.approx(-np.log([0.1, 0.3]).mean())


def test_gan_loss_clamps_log():
    loss_d, loss_r = tr.gan_loss(np.array([0.0]), np.array([1.0]))
    assert np.isfinite(loss_d) and np.isfinite(loss_r)
    assert loss_d == pytest.approx(-2 * np.log(1e-7))
    assert tr.gan_loss(np.array([0.5]), np.array([0.0]))[1] == pytest.approx(-np.log(1e-7))


@pytest.mark.parametrize("fn", [tr.d_real_loss, tr.d_fake_loss, tr.generator_adversarial_loss])
def test_adversarial_gradients(fn):
    p = np.array([0.2, 0.55, 0.9])
    _, g = fn(p)
    eps = 1e-7
    num = [(fn(p + eps * e)[0] - fn(p - eps * e)[0]) / (2 * eps) for e in np.eye(3)]
    np.testing.assert_allclose(g, num, rtol=1e-6)


def test_mse_and_roi_losses():
    I = np.zeros((1, 2, 4, 4, 1))
    O = np.full_like(I, 0.5)
    assert tr.mse_loss(I, O)[0] == pytest.approx(0.25)
    m = np.zeros((1, 2, 4, 4), bool)
    m[0, 0, :2, :2] = True
    O2 = O.copy()
    O2[~m[..., None].repeat(1, -1)] = 3.0  # errors outside the ROI are ignored
    v, g = tr.roi_mse_loss(I, O2, m)
    assert v == pytest.approx(0.25)
    assert np.all(g[~m[..., None]] == 0)
    full = np.ones((1, 2, 4, 4), bool)
    assert tr.roi_mse_loss(I, O, full)[0] == pytest.approx(tr.mse_loss(I, O)[0])


def test_roi_loss_empty_mask_warns():
    I = np.zeros((1, 2, 3, 3, 1))
    with pytest.warns(UserWarning, match="empty ROI"):
        v, g = tr.roi_mse_loss(I, I + 1, np.zeros((1, 2, 3, 3), bool))
    assert v == 0.0 and not g.any()


def test_diff_frames_and_union_masks():
    w = np.arange(4.0)[None, :, None, None] * np.ones((1, 4, 2, 2))
    m = np.zeros((1, 4, 2, 2), bool)
    m[0, 0, 0, 0] = m[0, 2, 1, 1] = True
    res, union = tr.diff_frames(w, m)
    assert res.shape == (1, 3, 2, 2) and np.all(res == 1)
    assert union[0, 0, 0, 0] and union[0, 1, 1, 1] and union[0, 2, 1, 1]
    assert not union[0, 0, 1, 1]
    with pytest.raises(ValueError):
        tr.diff_frames(np.zeros((1, 1, 2, 2)))


@given(hnp.arrays(np.float64, (1, 5, 3, 3, 1), elements=st.floats(-1, 1)),
       hnp.arrays(np.float64, (1, 5, 3, 3, 1), elements=st.floats(-1, 1)))
def test_diff_loss_gradient_matches_definition(I, O):
    m = np.ones((1, 4, 3, 3, 1), bool)
    v, g = tr.diff_loss(I, O, m)
    dI, dO = np.diff(I, axis=1), np.diff(O, axis=1)
    assert v == pytest.approx(np.mean((dO - dI) ** 2), abs=1e-12)
    E = 2 * (dO - dI) / dO.size
    ref = np.zeros_like(O)
    ref[:, 1:] += E
    ref[:, :-1] -= E
    np.testing.assert_allclose(g, ref, atol=1e-12)


def test_diff_loss_zero_for_static_offset():
    I = np.random.default_rng(0).uniform(-1, 1, (1, 6, 4, 4, 1))
    m = np.ones((1, 5, 4, 4, 1), bool)
    # a constant offset of every frame leaves the difference frames unchanged
    assert tr.diff_loss(I, I + 0.3, m)[0] == pytest.approx(0.0, abs=1e-24)


# ---- configuration -----------------------------------------------------

def test_variant_default_weights():
    assert tr.LossConfig("Fusion-Diff-ROI-3DCAE").lam_t_s == 1.0
    c = tr.LossConfig("Fusion-Diff-ROI-3DCAE")
    assert (c.lam_t_s, c.lam_t_d, c.lam_f) == (1.0, 1.0, 1.0)
    assert tr.LossConfig("Thermal-Diff-ROI-3DCAE").lam_d == 1.0
    assert tr.LossConfig("Thermal-ROI-3DCAE").lam == 0.1
    assert tr.LossConfig("Fusion-ROI-3DCAE").lam_f == 0.1


def test_weight_validation():
    assert tr.LossConfig("Thermal-3DCAE", lam=0.0).lam == 0.0
    with pytest.raises(ValueError, match="non-negative"):
        tr.LossConfig("Thermal-3DCAE", lam=-1.0)
    with pytest.raises(ValueError, match="not used"):
        tr.LossConfig("Thermal-3DCAE", lam_d=1.0)
    with pytest.raises(ValueError, match="unknown variant"):
        tr.LossConfig("Thermal-4DCAE")


def test_weights_scale_reconstruction_gradient(rng):
    batch = random_batch(rng)
    out = {k: batch[k] * 0.5 for k in ("thermal", "flow")}
    _, g1 = tr.reconstruction_terms(tr.LossConfig("Fusion-ROI-3DCAE", lam_t=1.0, lam_f=1.0),
                                    batch, out)
    _, g3 = tr.reconstruction_terms(tr.LossConfig("Fusion-ROI-3DCAE", lam_t=3.0, lam_f=0.0),
                                    batch, out)
    np.testing.assert_allclose(g3["thermal"], 3 * g1["thermal"])
    assert not g3["flow"].any()


# ---- end-to-end generator gradients -----------------------------------

@pytest.mark.parametrize("variant", GRAD_VARIANTS)
def test_generator_gradients_match_finite_differences(variant):
    assert generator_gradcheck(variant) < 1e-3


def test_discriminator_gradient_direction(rng):
    """A D step lowers the discriminator loss on the same batch."""
    models = tr.build_variant_models("Thermal-ROI-3DCAE", 0)
    cfg = tr.LossConfig("Thermal-ROI-3DCAE")
    batch = random_batch(rng, n=2, dtype=np.float32)
    out = models.reconstruct(batch)

    def d_loss():
        d = models.discriminator
        pr = d.forward(tr.discriminator_inputs(cfg.spec, batch), update_stats=False)
        pf = d.forward(tr.discriminator_inputs(cfg.spec, batch, out), update_stats=False)
        return tr.gan_loss(pr, pf)[0]

    before = d_loss()
    tr.discriminator_step(models, cfg, batch, out, tr.SGD(lr=1e-3))
    assert d_loss() < before


# ---- loop --------------------------------------------------------------

def tiny_windowset(rng, n_frames=10):
    n = n_frames
    mask = np.zeros((n, 64, 64), bool)
    mask[:, 20:44, 26:38] = True
    th = np.where(mask, rng.uniform(-1, 1, (n, 64, 64)), -1).astype(np.float32)
    fmask = mask[1:] | mask[:-1]
    fl = np.where(fmask, rng.uniform(-1, 1, (n - 1, 64, 64)), -1).astype(np.float32)
    sv = SubVideoArrays("v", np.arange(n), th, th, mask, fl, fl, fmask, np.zeros(n, np.int64))
    return WindowSet([sv])


def test_train_writes_log_and_checkpoint(tmp_path, rng):
    data = tiny_windowset(rng)
    cfg = tr.TrainConfig(epochs=2, batch_size=2, samples_per_epoch=2, seed=0)
    res = tr.train("Fusion-Diff-ROI-3DCAE", data, cfg, out_dir=tmp_path)
    assert len(res.log) == 2
    rows = list(csv.DictReader(open(tmp_path / "loss_log.csv")))
    assert list(rows[0]) == tr.LOSS_COLUMNS
    assert all(rows[0][c] != "" for c in tr.LOSS_COLUMNS)
    assert (tmp_path / "checkpoint.tfad").read_bytes()[:4] == b"TFAD"
    assert len(res.reconstruction_curve()) == 2


def test_loss_log_round_trip(tmp_path, rng):
    res = tr.train("Thermal-Diff-ROI-3DCAE", tiny_windowset(rng),
                   tr.TrainConfig(epochs=2, batch_size=4), out_dir=tmp_path)
    back = tr.read_loss_log(tmp_path / "loss_log.csv")
    assert back == res.log
    assert tr.TrainResult(None, back).reconstruction_curve() == res.reconstruction_curve()


def test_reconstruction_loss_decreases_in_smoke_run(rng):
    data = tiny_windowset(rng, n_frames=39)
    assert len(data) == 32
    res = tr.train("Thermal-3DCAE", data, tr.TrainConfig(epochs=2, batch_size=8, seed=0))
    curve = res.reconstruction_curve()
    assert curve[1] < curve[0]


def test_checkpoint_round_trip_keeps_validation_loss(tmp_path, rng):
    data = tiny_windowset(rng)
    cfg = tr.LossConfig("Fusion-ROI-3DCAE")
    res = tr.train("Fusion-ROI-3DCAE", data, tr.TrainConfig(epochs=1, batch_size=3),
                   out_dir=tmp_path)
    fresh = tr.build_variant_models("Fusion-ROI-3DCAE", seed=99)
    load_models(tmp_path / "checkpoint.tfad", fresh.all)
    assert tr.validation_loss(fresh, cfg, data) == tr.validation_loss(res.models, cfg, data)


def test_unused_terms_are_blank(tmp_path, rng):
    res = tr.train("Thermal-ROI-3DCAE", tiny_windowset(rng),
                   tr.TrainConfig(epochs=1, batch_size=3), out_dir=tmp_path)
    row = next(csv.DictReader(open(tmp_path / "loss_log.csv")))
    assert row["loss_diff"] == "" and row["loss_roi_flow"] == ""
    assert float(row["loss_roi_thermal"]) > 0
    assert len(res.log) == 1


def test_non_finite_loss_names_batch_and_term(rng, monkeypatch):
    monkeypatch.setattr(tr, "d_fake_loss", lambda p: (float("nan"), np.zeros_like(p)))
    with pytest.raises(tr.TrainingDiverged, match=r"epoch 1 batch 0: non-finite loss_D"):
        tr.train("Thermal-3DCAE", tiny_windowset(rng), tr.TrainConfig(epochs=1, batch_size=3))


def test_training_is_deterministic(rng):
    data = tiny_windowset(rng)
    cfg = tr.TrainConfig(epochs=1, batch_size=2, samples_per_epoch=2, seed=4)
    a = tr.train("Thermal-Diff-ROI-3DCAE", data, cfg).log
    b = tr.train("Thermal-Diff-ROI-3DCAE", data, cfg).log
    assert a == b


def test_variant_mismatch_rejected(rng):
    with pytest.raises(ValueError, match="loss config"):
        tr.train("Thermal-3DCAE", tiny_windowset(rng), tr.TrainConfig(epochs=1),
                 tr.LossConfig("Flow-3DCAE"))
