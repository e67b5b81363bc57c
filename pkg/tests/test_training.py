import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import tiny_counting_model
from fcnrlstm import training as tr
from fcnrlstm.autodiff import Tape
from fcnrlstm.data import CountingSequence
from fcnrlstm.errors import InvalidArgumentError
from fcnrlstm.supervision import GroundTruth, density_from_dots
from fcnrlstm.training import AugParams, TrainConfig


# losses ---------------------------------------------------------------------


def test_density_loss_examples():
    f = np.random.default_rng(0).uniform(size=(2, 1, 4, 4))
    assert tr.density_loss(f, f).value == 0
    pred = np.zeros((1, 1, 1, 1))
    pred[...] = 1
    assert float(tr.density_loss(pred, np.zeros_like(pred)).value) == 0.5
    with pytest.raises(InvalidArgumentError):
        tr.density_loss(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 2, 3)))


def test_density_loss_duplicate_batch_invariant():
    r = np.random.default_rng(1)
    p, t = r.uniform(size=(3, 1, 5, 5)), r.uniform(size=(3, 1, 5, 5))
    once = float(tr.density_loss(p, t).value)
    twice = float(tr.density_loss(np.concatenate([p, p]), np.concatenate([t, t])).value)
    assert twice == pytest.approx(once, rel=1e-14)


def test_count_loss_examples():
    assert float(tr.count_loss(np.array([[3.0]]), np.array([5.0])).value) == 2.0
    assert float(tr.count_loss(np.array([[7.0]]), np.array([5.0])).value) == 2.0
    assert float(tr.count_loss(np.array([[5.0], [1.0]]), np.array([5.0, 1.0])).value) == 0
    with pytest.raises(InvalidArgumentError):
        tr.count_loss(np.zeros((2, 1)), np.zeros(3))


def test_total_loss_examples():
    assert float(tr.total_loss(1.0, 50.0, 0.01).value) == pytest.approx(1.5, rel=1e-15)
    assert float(tr.total_loss(0.7, 50.0, 0.0).value) == 0.7
    with pytest.raises(InvalidArgumentError):
        tr.total_loss(1.0, 1.0, -0.1)


def test_default_hyperparameters():
    cfg = TrainConfig()
    assert cfg.lam == 0.01 and cfg.learning_rate == 1e-4 and cfg.unroll == 5


def test_config_validation_and_round_trip():
    cfg = TrainConfig(variant="FCN-dLSTM", contrast=(0.9, 1.1), epochs=3)
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    for kw in [dict(lam=-1), dict(learning_rate=0), dict(batch=0), dict(unroll=0), dict(count_target="x"),
               dict(variant="nope"), dict(crop_min=1.5), dict(flip_prob=2)]:
        with pytest.raises(InvalidArgumentError):
            TrainConfig(**kw)


def test_batch_loss_matches_manual_sum(tiny_seqs):
    model = tiny_counting_model()
    seq = tiny_seqs[0]
    frames = np.stack([seq.frames[0:3], seq.frames[3:6]])
    dens = np.stack([seq.density[0:3], seq.density[3:6]])
    counts = np.stack([seq.counts[0:3], seq.counts[3:6]])
    loss, br, out = tr.batch_loss(model, frames, dens, counts, 0.01)
    pd = out.density.value
    td = dens.transpose(1, 0, 2, 3, 4).reshape(pd.shape)
    l_d = ((pd - td) ** 2).sum() / 4
    pc = np.stack([c.value[:, 0] for c in out.counts], axis=1)
    l_c = ((pc - counts) ** 2).sum() / 4
    assert br.L_D == pytest.approx(l_d, rel=1e-12)
    assert br.L_C == pytest.approx(l_c, rel=1e-12)
    assert br.L == pytest.approx(l_d + 0.01 * l_c, rel=1e-12)
    _, br2, _ = tr.batch_loss(model, frames, dens, counts, 0.01, use_density_loss=False)
    assert br2.L == pytest.approx(0.01 * l_c, rel=1e-12)
    with pytest.raises(InvalidArgumentError):
        tr.batch_loss(model, frames, dens[:, :, :, :8], counts, 0.01)


# optimiser ------------------------------------------------------------------


def test_adam_zero_gradient_is_noop():
    p = np.array([1.0, -2.0])
    new, m, v = tr.adam_step(p, np.zeros(2), np.zeros(2), np.zeros(2), 1, 0.1)
    np.testing.assert_array_equal(new, p)


def test_adam_first_step_is_lr_times_sign():
    g = np.array([3.0, -0.2, 1e-3])
    new, _, _ = tr.adam_step(np.zeros(3), g, np.zeros(3), np.zeros(3), 1, 0.01)
    np.testing.assert_allclose(new, -0.01 * np.sign(g), rtol=1e-4)


def test_adam_constant_gradient_step_tends_to_lr():
    g = np.array([0.5, -4.0])
    p, m, v = np.zeros(2), np.zeros(2), np.zeros(2)
    for t in range(1, 3001):
        prev = p
        p, m, v = tr.adam_step(p, g, m, v, t, 1e-3)
    np.testing.assert_allclose(np.abs(p - prev), 1e-3, rtol=1e-6)
    np.testing.assert_array_equal(np.sign(p - prev), -np.sign(g))


def test_adam_matches_reference_formula():
    r = np.random.default_rng(2)
    p, m, v = r.standard_normal(4), np.zeros(4), np.zeros(4)
    ref_p, ref_m, ref_v = p.copy(), m.copy(), v.copy()
    b1, b2, lr, eps = 0.9, 0.999, 0.05, 1e-8
    for t in range(1, 6):
        g = r.standard_normal(4)
        p, m, v = tr.adam_step(p, g, m, v, t, lr, b1, b2, eps)
        ref_m = b1 * ref_m + (1 - b1) * g
        ref_v = b2 * ref_v + (1 - b2) * g * g
        ref_p = ref_p - lr * (ref_m / (1 - b1 ** t)) / (np.sqrt(ref_v / (1 - b2 ** t)) + eps)
    np.testing.assert_allclose(p, ref_p, rtol=1e-13)


def test_adam_errors():
    with pytest.raises(InvalidArgumentError):
        tr.adam_step(np.zeros(2), np.zeros(2), np.zeros(2), np.zeros(2), 0, 0.1)
    with pytest.raises(InvalidArgumentError):
        tr.adam_step(np.zeros(2), np.zeros(3), np.zeros(2), np.zeros(2), 1, 0.1)


def test_clip_global_norm():
    a, b = np.array([3.0]), np.array([4.0])
    assert tr.clip_global_norm([a, b], 1.0) == 5.0
    assert math.hypot(a[0], b[0]) == pytest.approx(1.0)
    c = np.array([0.3])
    assert tr.clip_global_norm([c], 1.0) == pytest.approx(0.3) and c[0] == 0.3


# augmentation ---------------------------------------------------------------


def test_flip_twice_is_identity():
    r = np.random.default_rng(3)
    f, d = r.uniform(size=(3, 1, 8, 8)).astype(np.float32), r.uniform(size=(3, 1, 8, 8))
    c = d.reshape(3, -1).sum(1)
    p = AugParams(flip=True)
    f2, d2, c2 = tr.apply_augmentation(*tr.apply_augmentation(f, d, c, p), p)
    np.testing.assert_array_equal(f2, f)
    np.testing.assert_array_equal(d2, d)
    np.testing.assert_array_equal(c2, c)


def test_full_frame_crop_is_identity():
    r = np.random.default_rng(4)
    f, d = r.uniform(size=(2, 1, 8, 8)), r.uniform(size=(2, 1, 8, 8))
    c = np.array([5.0, 6.0])
    out = tr.apply_augmentation(f, d, c, AugParams(crop=(0, 0, 8, 8)))
    for a, b in zip(out, (f, d, c)):
        np.testing.assert_array_equal(a, b)


def test_crop_removes_kernel_mass():
    gt = density_from_dots([(7, 12), (24, 12)], 1.5, 24, 32)
    frame = np.ones((1, 1, 24, 32), dtype=np.float32)
    new_frame, new_gt = tr.augment(frame, gt, None, params=AugParams(crop=(0, 8, 24, 24)))
    # oracle: the left kernel alone, integrated over the kept columns
    left = density_from_dots([(7, 12)], 1.5, 24, 32).density[0, 0]
    assert new_gt.count == pytest.approx(1.0 + left[:, 8:].sum(), abs=1e-9)
    assert new_gt.density.sum() == pytest.approx(new_gt.count, abs=1e-6)
    assert not new_frame[..., :8].any() and new_frame[..., 8:].all()


def test_crop_larger_than_frame_rejected():
    with pytest.raises(InvalidArgumentError):
        tr.apply_augmentation(np.zeros((1, 8, 8)), np.zeros((1, 8, 8)), np.zeros(1), AugParams(crop=(0, 0, 9, 8)))
    with pytest.raises(InvalidArgumentError):
        tr.apply_augmentation(np.zeros((1, 8, 8)), np.zeros((1, 8, 8)), np.zeros(1), AugParams(crop=(2, 0, 7, 8)))


def test_photometric_changes_leave_labels():
    r = np.random.default_rng(5)
    f, d = r.uniform(size=(1, 1, 8, 8)), r.uniform(size=(1, 1, 8, 8))
    f2, d2, c2 = tr.apply_augmentation(f, d, np.array([2.0]), AugParams(brightness=0.1, contrast=1.2))
    np.testing.assert_array_equal(d2, d)
    assert c2[0] == 2.0
    np.testing.assert_allclose(f2, (f - f.mean()) * 1.2 + f.mean() + 0.1, rtol=1e-12)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 2 ** 32 - 1))
def test_sampled_parameters_in_range(seed):
    cfg = TrainConfig()
    p = tr.sample_augmentation(np.random.default_rng(seed), cfg, 64, 48)
    assert -0.1 <= p.brightness <= 0.1 and 0.8 <= p.contrast <= 1.25
    if p.crop is not None:
        top, left, h, w = p.crop
        assert 0.9 * 64 - 1 <= h <= 64 and 0.9 * 48 - 1 <= w <= 48
        assert top + h <= 64 and left + w <= 48


def test_disabled_augmentation_keeps_stream_aligned():
    on, off = np.random.default_rng(0), np.random.default_rng(0)
    tr.sample_augmentation(on, TrainConfig(), 16, 16)
    assert tr.sample_augmentation(off, TrainConfig(augment=False), 16, 16) == AugParams()
    assert on.random() == off.random()


def test_single_frame_augment_returns_ground_truth():
    gt = GroundTruth(np.ones((1, 1, 4, 4)) / 16, 1.0)
    f, g = tr.augment(np.zeros((1, 1, 4, 4)), gt, np.random.default_rng(0), TrainConfig(augment=False))
    assert isinstance(g, GroundTruth) and g.count == 1.0


# loop -----------------------------------------------------------------------


def test_windows_are_non_overlapping_and_cover(tiny_seqs):
    w = tr.make_windows(tiny_seqs, 5, np.random.default_rng(0))
    assert sorted(w) == [(k, s) for k in range(len(tiny_seqs)) for s in (0, 5)]
    assert w != sorted(w) or len(w) < 3


def test_zero_lambda_fcn_only_leaves_recurrent_parameters(tiny_seqs):
    model = tiny_counting_model("FCN-HA")
    before = {n: p.value.copy() for n, p in model.named_parameters()}
    cfg = TrainConfig(variant="FCN-HA", lam=0.0, learning_rate=1e-3, batch=2, unroll=3, epochs=1, seed=1)
    tr.train(model, tiny_seqs, [], cfg)
    changed = {n for n, p in model.named_parameters() if not np.array_equal(p.value, before[n])}
    fcn = {n for n, _ in model.fcn.named_parameters()}
    assert changed and changed <= fcn


def test_zero_lambda_gives_zero_recurrent_gradient(tiny_seqs):
    model = tiny_counting_model("FCN-rLSTM")
    seq = tiny_seqs[1]
    tape = Tape()
    loss, _, _ = tr.batch_loss(model, seq.frames[None, :3], seq.density[None, :3], seq.counts[None, :3], 0.0, tape)
    tape.backward(loss)
    assert all(not p.grad.any() for p in model.lstm.parameters() + model.fc.parameters())
    assert any(p.grad.any() for p in model.fcn.parameters())


def test_small_step_descends(tiny_seqs):
    model = tiny_counting_model("FCN-rLSTM")
    for p in model.fc.parameters():
        p.value[...] = np.random.default_rng(0).normal(0, 0.1, p.shape)
    seq = tiny_seqs[2]
    batch = (seq.frames[None, 3:6], seq.density[None, 3:6], seq.counts[None, 3:6])
    tape = Tape()
    loss, br, _ = tr.batch_loss(model, *batch, 0.01, tape)
    tape.backward(loss)
    params = model.parameters()
    sq = sum(float((p.grad ** 2).sum()) for p in params)
    eta = 1e-4 / math.sqrt(sq)
    for p in params:
        p.value -= eta * p.grad
    _, after, _ = tr.batch_loss(model, *batch, 0.01)
    assert after.L < br.L
    # first-order prediction of the decrease
    assert br.L - after.L == pytest.approx(eta * sq, rel=1e-2)


def test_residual_identity_at_iteration_zero(tiny_seqs):
    model = tiny_counting_model("FCN-rLSTM")
    for p in model.fc.parameters():
        p.value[...] = 0
    seq = tiny_seqs[0]
    out = model.forward_window(np.stack([seq.frames[0:3], seq.frames[6:9]]))
    for c, b in zip(out.counts, out.base_counts):
        np.testing.assert_array_equal(c.value, b.value)


def test_mixed_resolution_rejected(tiny_seqs):
    odd = CountingSequence("odd", np.zeros((6, 1, 8, 8), np.float32), np.zeros((6, 1, 8, 8), np.float32),
                           np.zeros(6), np.arange(6))
    cfg = TrainConfig(variant="FCN-rLSTM", unroll=3, epochs=1)
    with pytest.raises(InvalidArgumentError):
        tr.train(tiny_counting_model(), [tiny_seqs[0], odd], [], cfg)
    with pytest.raises(InvalidArgumentError):
        tr.train(tiny_counting_model(), tiny_seqs, [odd], cfg)


def test_train_argument_checks(tiny_seqs):
    with pytest.raises(InvalidArgumentError):
        tr.train(tiny_counting_model(), tiny_seqs, [], TrainConfig(variant="FCN-dLSTM", unroll=3))
    with pytest.raises(InvalidArgumentError):
        tr.train(tiny_counting_model(), tiny_seqs, [], TrainConfig(variant="FCN-rLSTM", unroll=4))
    with pytest.raises(InvalidArgumentError):
        tr.train(tiny_counting_model(), [], [], TrainConfig(variant="FCN-rLSTM", unroll=3))


def test_max_iterations_and_curve(tiny_seqs, tmp_path):
    cfg = TrainConfig(variant="FCN-rLSTM", unroll=3, batch=2, epochs=5, max_iterations=5, learning_rate=1e-3)
    res = tr.train(tiny_counting_model(dtype=np.float32), tiny_seqs[:3], tiny_seqs[3:], cfg, out_dir=tmp_path)
    assert res.iterations == 5 and res.stopped_early
    rows = tr.read_curve(tmp_path / "curve.csv")
    assert [r["epoch"] for r in rows] == [1] and set(rows[0]) == set(tr.CURVE_COLUMNS)
    assert rows[0]["val_mae"] == pytest.approx(res.history[0]["val_mae"], rel=1e-9)
    assert (tmp_path / "model.ckpt").exists() and (tmp_path / "last.ckpt").exists()


def test_early_stopping_and_restore_best(tiny_seqs):
    seen = []
    cfg = TrainConfig(variant="FCN-HA", unroll=3, batch=4, epochs=30, patience=2, learning_rate=0.05, seed=2)
    model = tiny_counting_model("FCN-HA")
    res = tr.train(model, tiny_seqs[:3], tiny_seqs[3:], cfg, callback=seen.append)
    vals = [r["val_mae"] for r in res.history]
    assert len(seen) == len(vals)
    assert res.best_val_mae == min(vals) and res.best_epoch == int(np.argmin(vals)) + 1
    if res.stopped_early:
        assert len(vals) - res.best_epoch == 2
    assert tr.evaluate(model, tiny_seqs[3:])["mae"] == pytest.approx(res.best_val_mae, rel=1e-6)


def test_evaluate_report(tiny_seqs):
    model = tiny_counting_model("FCN-HA")
    rep = tr.evaluate(model, tiny_seqs[:2])
    assert rep["pred"].shape == rep["true"].shape == (24,)
    assert rep["mae"] <= math.sqrt(rep["mse"]) + 1e-12
    np.testing.assert_allclose(rep["mae"], np.abs(rep["pred"] - rep["true"]).mean())


def test_fixed_seed_training_is_bit_reproducible(tiny_seqs):
    cfg = TrainConfig(variant="FCN-rLSTM", unroll=3, batch=2, epochs=2, learning_rate=1e-3, seed=4)
    runs = []
    for _ in range(2):
        m = tiny_counting_model(dtype=np.float32)
        r = tr.train(m, tiny_seqs[:3], tiny_seqs[3:], replace(cfg))
        runs.append(([p.value.copy() for p in m.parameters()], r.history))
    for a, b in zip(runs[0][0], runs[1][0]):
        np.testing.assert_array_equal(a, b)
    assert runs[0][1] == runs[1][1]
