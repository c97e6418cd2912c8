import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from protloc.data import (
    BLUE, FAMILY_ORDER, GREEN, RED, YELLOW, MORPHOLOGIES, NUM_CLASSES, REGIONS, STRUCTURE_CHANNELS, AugmentationPlan,
    FoldAssignment, Sample, apply_op, augment, choose_ops, class_pattern, default_marginals,
    generate_synthetic_dataset, load_dataset, make_negative, sample_rng, save_dataset, stratified_kfold,
    tta_batch, tta_variants,
)
from oracles import proportional_deviation


@pytest.fixture(scope="module")
def small_ds():
    return generate_synthetic_dataset(60, 32, seed=11)


def _sample(rng, size=16):
    return Sample(rng.random((4, size, size)).astype(np.float32), np.eye(NUM_CLASSES, dtype=np.uint8)[3], "x")


# ---- generation -----------------------------------------------------------

def test_default_marginals_shape():
    m = default_marginals()
    assert m[0] == pytest.approx(0.4) and m[1] == pytest.approx(0.32)
    assert m.min() == pytest.approx(0.004) and np.all(np.diff(m) <= 0)


def test_class_patterns_are_distinct():
    pairs = {class_pattern(c) for c in range(NUM_CLASSES)}
    assert len(pairs) == NUM_CLASSES == len(REGIONS) * len(MORPHOLOGIES)


def test_generator_contract(small_ds):
    ds = small_ds
    assert ds.images.shape == (60, 4, 32, 32) and ds.images.dtype == np.float32
    assert ds.images.min() >= 0 and ds.images.max() <= 1
    assert ds.labels.shape == (60, NUM_CLASSES) and ds.labels.any(axis=1).all()
    assert ds.manifest.class_counts == ds.labels.sum(axis=0).tolist()
    for labels, planted in zip(ds.labels, ds.manifest.patterns):
        assert sorted(c for c, _, _ in planted) == np.flatnonzero(labels).tolist()
        assert all((r, m) == class_pattern(c) for c, r, m in planted)


def test_green_carries_the_labels(small_ds):
    # the protein channel is near the noise floor only when nothing is planted
    neg = make_negative(small_ds[0], np.random.default_rng(0))
    assert small_ds.images[:, GREEN].max(axis=(1, 2)).min() > 0.3
    assert neg.image[GREEN].max() <= 0.05


def test_generation_is_deterministic(small_ds):
    again = generate_synthetic_dataset(60, 32, seed=11)
    assert again.images.tobytes() == small_ds.images.tobytes()
    assert again.manifest.to_dict() == small_ds.manifest.to_dict()
    other = generate_synthetic_dataset(60, 32, seed=12)
    assert other.images.tobytes() != small_ds.images.tobytes()


def test_prefix_stability():
    # sample i depends only on (seed, i), not on n
    a = generate_synthetic_dataset(5, 16, seed=3)
    b = generate_synthetic_dataset(8, 16, seed=3)
    assert a.images.tobytes() == b.images[:5].tobytes()


def test_marginals_half_counts_within_binomial_band():
    ds = generate_synthetic_dataset(1000, 16, marginals=np.full(NUM_CLASSES, 0.5), seed=5)
    counts = ds.labels.sum(axis=0)
    # P(|Bin(1000, .5) - 500| > 100) < 1e-9 per class
    assert counts.min() >= 400 and counts.max() <= 600


@pytest.mark.parametrize("kwargs", [
    {"n": 0}, {"size": 8}, {"marginals": np.full(NUM_CLASSES, 1.0)}, {"marginals": np.full(5, 0.5)},
])
def test_generator_rejects_bad_arguments(kwargs):
    args = {"n": 2, "size": 16, **kwargs}
    with pytest.raises(ValueError):
        generate_synthetic_dataset(args.pop("n"), args.pop("size"), **args)


def test_dataset_round_trip(tmp_path, small_ds):
    save_dataset(small_ds, tmp_path / "d")
    back = load_dataset(tmp_path / "d")
    assert back.images.tobytes() == small_ds.images.tobytes()
    assert np.array_equal(back.labels, small_ds.labels)
    assert back.ids == small_ds.ids


def test_load_rejects_inconsistent_counts(tmp_path, small_ds):
    import json
    save_dataset(small_ds, tmp_path / "d")
    m = json.loads((tmp_path / "d" / "manifest.json").read_text())
    m["class_counts"][0] += 1
    (tmp_path / "d" / "manifest.json").write_text(json.dumps(m))
    with pytest.raises(ValueError, match="class_counts"):
        load_dataset(tmp_path / "d")


def test_subset_recounts(small_ds):
    sub = small_ds.subset([0, 5, 7])
    assert sub.manifest.class_counts == small_ds.labels[[0, 5, 7]].sum(axis=0).tolist()
    assert sub.ids == [small_ds.ids[i] for i in (0, 5, 7)]


# ---- stratification -------------------------------------------------------

def test_stratify_exact_divisibility():
    labels = np.zeros((10, NUM_CLASSES), dtype=np.uint8)
    labels[:, 0] = 1
    fa = stratified_kfold(labels, 2, seed=0)
    assert fa.distribution(labels)[:, 0].tolist() == [5, 5]


def test_stratify_odd_count():
    labels = np.zeros((12, NUM_CLASSES), dtype=np.uint8)
    labels[:7, 0] = 1
    fa = stratified_kfold(labels, 2, seed=1)
    assert sorted(fa.distribution(labels)[:, 0].tolist()) == [3, 4]


def test_stratify_errors():
    with pytest.raises(ValueError):
        stratified_kfold(np.zeros((3, NUM_CLASSES)), 4)
    with pytest.raises(ValueError):
        stratified_kfold(np.zeros((3, NUM_CLASSES)), 1)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**16), k=st.integers(2, 6), n=st.integers(30, 250))
def test_stratify_partition_and_balance(seed, k, n):
    rng = np.random.default_rng(seed)
    labels = (rng.random((n, NUM_CLASSES)) < default_marginals()).astype(np.uint8)
    fa = stratified_kfold(labels, k, seed=seed)
    assert fa.folds.shape == (n,) and set(fa.folds.tolist()) <= set(range(k))
    assert fa.fold_sizes().sum() == n and fa.fold_sizes().max() - fa.fold_sizes().min() <= 1
    assert proportional_deviation(labels, fa.folds, k) <= 1 + 1e-9


def test_stratify_is_deterministic():
    labels = (np.random.default_rng(0).random((200, NUM_CLASSES)) < default_marginals()).astype(np.uint8)
    a, b = stratified_kfold(labels, 5, seed=9), stratified_kfold(labels, 5, seed=9)
    assert np.array_equal(a.folds, b.folds)


def test_fold_csv_round_trip(tmp_path):
    fa = FoldAssignment(3, np.array([0, 1, 2, 0]), ["a", "b", "c", "d"])
    fa.write_csv(tmp_path / "f.csv")
    back = FoldAssignment.read_csv(tmp_path / "f.csv")
    assert back.k == 3 and back.ids == fa.ids and np.array_equal(back.folds, fa.folds)
    assert back.indices(0).tolist() == [0, 3] and back.train_indices(0).tolist() == [1, 2]


# ---- augmentation ---------------------------------------------------------

def test_disabled_plan_is_identity(rng):
    s = _sample(rng)
    out = augment(s, AugmentationPlan.disabled(), np.random.default_rng(0))
    assert np.array_equal(out.image, s.image)


def test_rot90_twice_is_rot180(rng):
    img = _sample(rng).image
    np.testing.assert_array_equal(apply_op(apply_op(img, "rot90"), "rot90"), apply_op(img, "rot180"))


def test_plan_validation():
    with pytest.raises(ValueError):
        AugmentationPlan(probabilities={"blue": 1.5})
    with pytest.raises(ValueError):
        AugmentationPlan(ops={"blue": ("melt",)})
    with pytest.raises(ValueError):
        AugmentationPlan(purple=-0.1)


def test_augment_is_seeded(rng):
    s = _sample(rng)
    a = augment(s, AugmentationPlan(), np.random.default_rng(4))
    b = augment(s, AugmentationPlan(), np.random.default_rng(4))
    assert np.array_equal(a.image, b.image)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_augment_preserves_shape_range_and_labels(seed):
    rng = np.random.default_rng(seed)
    s = _sample(rng)
    plan = AugmentationPlan(probabilities={f: 1.0 for f in FAMILY_ORDER})
    out = augment(s, plan, rng)
    assert out.image.shape == s.image.shape and out.image.dtype == s.image.dtype
    assert out.image.min() >= 0 and out.image.max() <= 1
    assert np.array_equal(out.labels, s.labels)


def test_every_op_preserves_shape_and_range(rng):
    img = _sample(rng).image
    for ops in AugmentationPlan().ops.values():
        for op in ops:
            out = apply_op(img, op, np.random.default_rng(1))
            assert out.shape == img.shape and 0 <= out.min() and out.max() <= 1


def test_op_frequencies_match_plan():
    plan = AugmentationPlan(probabilities={"blue": 0.3, "orange": 0.5, "red": 0.8, "green": 0.1})
    rng = np.random.default_rng(0)
    draws = 10_000
    fam_counts = {f: 0 for f in FAMILY_ORDER}
    op_counts = {}
    for _ in range(draws):
        chosen = choose_ops(plan, rng)
        assert len({f for f, _ in chosen}) == len(chosen)  # at most one op per family
        assert [f for f, _ in chosen] == [f for f in FAMILY_ORDER if f in dict(chosen)]
        for fam, op in chosen:
            fam_counts[fam] += 1
            op_counts[op] = op_counts.get(op, 0) + 1
    for fam, p in plan.probabilities.items():
        assert abs(fam_counts[fam] - draws * p) <= 3 * np.sqrt(draws * p * (1 - p))
    for fam, ops in plan.ops.items():
        p = plan.probabilities[fam] / len(ops)
        for op in ops:
            assert abs(op_counts.get(op, 0) - draws * p) <= 3 * np.sqrt(draws * p * (1 - p)) + 1


def test_make_negative_contract(rng):
    s = _sample(rng)
    neg = make_negative(s, np.random.default_rng(0))
    assert neg.labels.sum() == 0
    for c in STRUCTURE_CHANNELS:
        assert neg.image[c].tobytes() == s.image[c].tobytes()
    assert neg.image[GREEN].max() <= 0.05
    assert s.labels.sum() == 1  # input untouched


# ---- TTA ------------------------------------------------------------------

def test_tta_variants(rng):
    img = rng.random((4, 8, 8))
    v = tta_variants(img)
    assert len(v) == 4 and np.array_equal(v[0], img)
    np.testing.assert_array_equal(v[3], img[:, ::-1, :][:, :, ::-1])
    for t in (lambda x: x[:, :, ::-1], lambda x: x[:, ::-1, :], lambda x: x[:, ::-1, ::-1]):
        np.testing.assert_array_equal(t(t(img)), img)
    const = np.full((4, 6, 6), 0.3)
    assert all(np.array_equal(x, const) for x in tta_variants(const))
    with pytest.raises(ValueError):
        tta_variants(np.zeros((4, 6, 5)))


def test_tta_batch_matches_per_image(rng):
    batch = rng.random((3, 4, 6, 6))
    per = [tta_variants(x) for x in batch]
    for j, v in enumerate(tta_batch(batch)):
        np.testing.assert_array_equal(v, np.stack([p[j] for p in per]))


def test_sample_rng_streams_are_independent():
    a = sample_rng(1, 2, 3).random(4)
    assert np.array_equal(a, sample_rng(1, 2, 3).random(4))
    assert not np.array_equal(a, sample_rng(1, 2, 4).random(4))


def test_structure_channels_show_cell_layout(small_ds):
    for img in small_ds.images[:10]:
        nucleus, ring, rays = img[BLUE] > 0, img[YELLOW] > 0, img[RED] > 0
        assert nucleus.sum() > 20 and ring.sum() > nucleus.sum()
        assert not (nucleus & ring).any()  # the cytoplasm ring surrounds the nucleus
        # microtubule strokes run from the nuclear rim outwards
        assert (rays & ~nucleus).sum() >= 0.8 * rays.sum() > 0
