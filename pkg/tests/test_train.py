import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from protloc.data import AugmentationPlan, generate_synthetic_dataset
from protloc.losses import LossSchedule, bce_loss, class_weights_from_labels
from protloc.model import BlockConfig, NetworkConfig, StemConfig, build_network
from protloc.tensor import Parameter, Tape, Tensor, dense, sigmoid
from protloc.train import (
    AdadeltaState, NonFiniteGradientError, PlateauState, TrainConfig, adadelta_step, early_stop_check,
    evaluate_with_tta, fit, make_batch, measure_throughput, predict_scores, read_rows, read_score_matrix,
    reduce_on_plateau, train_epoch, write_score_matrix,
)

TINY = NetworkConfig(stem=StemConfig(8, 3, 2), stages=((BlockConfig(8, 8, 16, 4, 2), 1),), seed=1)


@pytest.fixture(scope="module")
def tiny_ds():
    return generate_synthetic_dataset(40, 16, seed=2)


def _tiny_train_cfg(**kw):
    base = dict(batch_size=16, max_epochs=3, seed=5, grid_size=100, eval_batch_size=32,
                schedule=LossSchedule(warmup_epochs=1, rescale_step=5))
    base.update(kw)
    return TrainConfig(**base)


def test_adadelta_scalar_recurrence():
    p = Parameter(np.array([0.0]), "x", dtype=np.float64)
    p.grad[...] = 1.0
    state = AdadeltaState(rho=0.9, eps=1e-6, lr=0.1)
    adadelta_step([p], state)
    expected = 0.1 * -math.sqrt(1e-6 / (0.1 + 1e-6))
    assert p.data[0] == pytest.approx(expected, rel=1e-12)
    assert expected == pytest.approx(-3.1623e-4, rel=1e-4)
    # second step by hand
    eg = 0.9 * 0.1 + 0.1
    ed = 0.1 * (expected / 0.1) ** 2
    d2 = -math.sqrt((ed + 1e-6) / (eg + 1e-6))
    adadelta_step([p], state)
    assert p.data[0] == pytest.approx(expected + 0.1 * d2, rel=1e-12)


def test_adadelta_zero_gradient_is_noop(rng):
    p = Parameter(rng.standard_normal((3, 3)), "w", dtype=np.float64)
    before = p.data.copy()
    state = AdadeltaState()
    for _ in range(5):
        p.zero_grad()
        adadelta_step([p], state)
    assert np.array_equal(p.data, before)


def test_adadelta_rejects_nan(rng):
    p = Parameter(np.zeros(2), "w", dtype=np.float64)
    p.grad[...] = [np.nan, 0.0]
    with pytest.raises(NonFiniteGradientError, match="w"):
        adadelta_step([p], AdadeltaState())


def test_adadelta_descends_on_separable_toy(rng):
    x = np.concatenate([rng.normal(10, 1, (50, 2)), rng.normal(-10, 1, (50, 2))])
    y = np.concatenate([np.ones((50, 1)), np.zeros((50, 1))])
    w = Parameter(np.zeros((2, 1)), "w", dtype=np.float64)
    b = Parameter(np.zeros(1), "b", dtype=np.float64)
    state = AdadeltaState()

    def loss_value():
        return bce_loss(sigmoid(dense(Tensor(x), w, b)), y).data.item()

    start = loss_value()
    for _ in range(200):
        w.zero_grad()
        b.zero_grad()
        with Tape() as tape:
            loss = bce_loss(sigmoid(dense(Tensor(x), w, b)), y)
        tape.backward(loss)
        adadelta_step([w, b], state)
    assert loss_value() <= 0.5 * start


def test_plateau_examples():
    s = PlateauState(lr=0.1, patience=3)
    for m in (5.0, 4.0, 3.0, 2.0):
        assert reduce_on_plateau(s, m) == 0.1
    s = PlateauState(lr=0.1, patience=3)
    lrs = [reduce_on_plateau(s, 1.0) for _ in range(5)]
    assert lrs == [0.1, 0.1, 0.1, 0.1, 0.05]  # first call sets the best, 4th non-improving call halves
    s = PlateauState(lr=1e-3, patience=0, min_lr=1e-3)
    assert all(reduce_on_plateau(s, 1.0) == 1e-3 for _ in range(10))
    with pytest.raises(ValueError):
        PlateauState(factor=1.0)
    with pytest.raises(ValueError):
        reduce_on_plateau(PlateauState(), math.nan)


@settings(max_examples=50, deadline=None)
@given(metrics=st.lists(st.floats(0, 1), min_size=1, max_size=300), patience=st.integers(0, 20))
def test_plateau_lr_monotone_and_floored(metrics, patience):
    s = PlateauState(lr=0.1, patience=patience, min_lr=1e-3)
    lrs = [reduce_on_plateau(s, m) for m in metrics]
    assert all(b <= a for a, b in zip(lrs, lrs[1:]))
    assert min(lrs) >= 1e-3


def test_early_stop_examples():
    assert not early_stop_check([0.5, 0.6, 0.7])
    assert early_stop_check([0.7, 0.7, 0.7, 0.7, 0.7, 0.7])
    assert not early_stop_check([0.7, 0.7, 0.7, 0.7, 0.702])
    assert not early_stop_check([0.7, 0.7, 0.7, 0.7, 0.7, 0.702])
    with pytest.raises(ValueError):
        early_stop_check([])


def test_make_batch_independent_of_batch_composition(tiny_ds):
    plan = AugmentationPlan()
    x_all, y_all = make_batch(tiny_ds, np.arange(8), plan, seed=3, epoch=1)
    x_one, y_one = make_batch(tiny_ds, np.array([5]), plan, seed=3, epoch=1)
    assert np.array_equal(x_all[5], x_one[0]) and np.array_equal(y_all[5], y_one[0])
    x_next, _ = make_batch(tiny_ds, np.arange(8), plan, seed=3, epoch=2)
    assert not np.array_equal(x_all, x_next)


def test_train_epoch_steps_and_stages():
    ds = generate_synthetic_dataset(100, 16, seed=4)
    cfg = _tiny_train_cfg(batch_size=32)
    model = build_network(TINY)
    opt, plateau = AdadeltaState(), PlateauState()
    rows, step = train_epoch(model, ds, cfg, opt, plateau, class_weights_from_labels(ds.labels), epoch=0)
    assert len(rows) == 4 and step == 4
    assert all(r["stage"] == 1 and r["total"] == r["bce"] for r in rows)
    assert all(np.isfinite(r["soft_f1"]) and np.isfinite(r["focal"]) for r in rows)


def test_train_epoch_rejects_empty(tiny_ds):
    with pytest.raises(ValueError):
        train_epoch(build_network(TINY), tiny_ds.subset([]), _tiny_train_cfg(), AdadeltaState(),
                    PlateauState(), np.ones(28), 0)


def test_tta_scores(tiny_ds, rng):
    model = build_network(TINY)
    scores = evaluate_with_tta(model, tiny_ds.images)
    assert scores.shape == (40, 28) and scores.min() >= 0 and scores.max() <= 1
    perm = rng.permutation(40)
    np.testing.assert_allclose(evaluate_with_tta(model, tiny_ds.images[perm]), scores[perm], rtol=0, atol=1e-12)
    sym = tiny_ds.images[:4] + tiny_ds.images[:4, :, ::-1, :]
    sym = (sym + sym[:, :, :, ::-1]) / 4
    np.testing.assert_array_equal(evaluate_with_tta(model, sym), predict_scores(model, sym).astype(np.float64))


def test_fit_runs_and_is_deterministic(tiny_ds, tmp_path):
    results = []
    for _ in range(2):
        model = build_network(TINY)
        seen = []
        res = fit(model, tiny_ds.subset(range(30)), tiny_ds.subset(range(30, 40)), _tiny_train_cfg(),
                  on_epoch_end=lambda e, m, info: seen.append((e, info["stage"])))
        results.append((res, model))
        assert seen == [(0, 1), (1, 2), (2, 3)]
    (a, ma), (b, mb) = results
    assert a.epochs_run == 3 and len(a.score_history) == 3 and len(a.raw_thresholds) == 3
    assert a.log.steps == b.log.steps and a.log.epochs == b.log.epochs
    assert all(np.array_equal(ma.arrays()[k], mb.arrays()[k]) for k in ma.arrays())
    a.log.write(tmp_path)
    rows = read_rows(tmp_path / "train_log.csv")
    assert len(rows) == 6 and rows[0]["stage"] == "1"
    assert len(read_rows(tmp_path / "epoch_log.csv")) == 3


def test_fit_lr_never_increases(tiny_ds):
    cfg = _tiny_train_cfg(plateau_patience=0)
    res = fit(build_network(TINY), tiny_ds.subset(range(30)), tiny_ds.subset(range(30, 40)), cfg)
    lrs = [r["lr"] for r in res.log.steps]
    assert all(b <= a for a, b in zip(lrs, lrs[1:])) and min(lrs) >= cfg.min_lr
    assert lrs[-1] < lrs[0]


def test_score_matrix_round_trip(tmp_path, rng):
    scores = rng.random((5, 28))
    ids = [f"s{i}" for i in range(5)]
    write_score_matrix(tmp_path / "s.csv", ids, scores)
    header = (tmp_path / "s.csv").read_text().splitlines()[0].split(",")
    assert header == ["sample_id"] + [f"c{c}" for c in range(28)]
    back_ids, back = read_score_matrix(tmp_path / "s.csv")
    assert back_ids == ids and np.array_equal(back, scores)


def test_measure_throughput_rows(tiny_ds):
    rows = measure_throughput(build_network(TINY), tiny_ds.images, batch_sizes=(1, 8), n_images=16, warmup=1)
    assert [r["batch_size"] for r in rows] == [1, 8]
    for r in rows:
        assert r["images"] == 16
        assert r["seconds_per_image"] == pytest.approx(r["seconds"] / 16)
        assert r["images_per_minute"] == pytest.approx(60 / r["seconds_per_image"])
    with pytest.raises(ValueError):
        measure_throughput(build_network(TINY), tiny_ds.images[:0])
