import numpy as np
import pytest

from simtrans.synthdata import (
    ConfigurationError,
    DatasetFormatError,
    DatasetSpec,
    NoiseSpec,
    generate_dataset,
    inject_web_noise,
    load_dataset,
    save_dataset,
    split_validation,
)

SMALL = DatasetSpec(n_base_categories=4, n_novel_categories=2, dim=3,
                    base_train_per_category=10, novel_train_per_category=10,
                    test_per_category=5, n_superclusters=2, seed=11)


def test_record_count():
    ds = generate_dataset(SMALL)
    assert len(ds) == 4 * 10 + 4 * 5 + 2 * 10 + 2 * 5 == 90


def test_category_ids_are_disjoint():
    ds = generate_dataset(SMALL)
    base = set(ds.labels[ds.mask("base_train") | ds.mask("base_test")].tolist())
    novel = set(ds.labels[ds.mask("novel_train") | ds.mask("novel_test")].tolist())
    assert base == {0, 1, 2, 3} and novel == {4, 5}


def test_zero_intra_std_collapses_to_prototypes():
    ds = generate_dataset(DatasetSpec(intra_category_std=0.0, seed=2))
    for c in range(20):
        feats = ds.features[ds.labels == c]
        np.testing.assert_array_equal(feats, np.broadcast_to(ds.geometry.prototypes[c], feats.shape))


def test_same_seed_is_bit_identical():
    a, b = generate_dataset(SMALL), generate_dataset(SMALL)
    assert a == b and a.features.tobytes() == b.features.tobytes()


def test_different_seed_differs():
    from dataclasses import replace
    assert generate_dataset(SMALL) != generate_dataset(replace(SMALL, seed=12))


def test_invalid_spec():
    with pytest.raises(ConfigurationError):
        generate_dataset(DatasetSpec(n_novel_categories=0))
    with pytest.raises(ConfigurationError):
        generate_dataset(DatasetSpec(intra_category_std=2.0, inter_category_std=1.0))


def test_default_geometry_is_fine_grained():
    ds = generate_dataset(DatasetSpec(seed=5))
    rng = np.random.default_rng(0)
    protos = ds.geometry.prototypes
    n_super = DatasetSpec().n_superclusters
    intra, inter = [], []
    while len(intra) < 1000 or len(inter) < 1000:
        i, j = rng.integers(0, len(ds), size=2)
        if i == j:
            continue
        a, b = ds.labels[i], ds.labels[j]
        d = np.linalg.norm(ds.features[i] - ds.features[j])
        if a == b:
            intra.append(d)
        elif a % n_super == b % n_super:
            inter.append(d)
    assert np.mean(intra) < np.mean(inter)
    assert protos.shape == (20, ds.dim)


def test_training_view_hides_ground_truth():
    view = inject_web_noise(generate_dataset(SMALL), NoiseSpec(0.3, seed=1)).view("novel_train")
    assert set(vars(view)) == {"features", "labels"}


def test_zero_noise_is_identity():
    ds = generate_dataset(SMALL)
    out = inject_web_noise(ds, NoiseSpec(ratio=0.0))
    assert out == ds
    assert not out.is_noisy[out.mask("novel_train")].any()


def test_exact_noisy_count_at_thirty_percent():
    spec = DatasetSpec(novel_train_per_category=100, seed=3)
    ds = inject_web_noise(generate_dataset(spec), NoiseSpec(0.3, seed=3))
    m = ds.mask("novel_train")
    for c in spec.novel_ids:
        assert ds.is_noisy[m & (ds.labels == c)].sum() == 30


def test_flip_outlier_split():
    spec = DatasetSpec(novel_train_per_category=100, seed=4)
    ds = inject_web_noise(generate_dataset(spec), NoiseSpec(0.2, flip_fraction=0.5, seed=4))
    m = ds.mask("novel_train")
    for c in spec.novel_ids:
        kinds = ds.noise_kinds[m & (ds.labels == c)]
        assert (kinds == "flip").sum() == 10 and (kinds == "outlier").sum() == 10


def test_flip_targets_next_novel_category_circularly():
    spec = DatasetSpec(seed=6)
    ds = inject_web_noise(generate_dataset(spec), NoiseSpec(0.3, flip_fraction=1.0, seed=6))
    flips = ds.noise_kinds == "flip"
    novel = spec.novel_ids
    for lab, true in zip(ds.labels[flips], ds.true_labels[flips]):
        assert true == novel[(novel.index(lab) + 1) % len(novel)]


def test_noise_flags_are_consistent_and_confined_to_novel_train():
    ds = inject_web_noise(generate_dataset(DatasetSpec(seed=8)), NoiseSpec(0.4, seed=8))
    expected = (ds.labels != ds.true_labels) | (ds.noise_kinds == "outlier")
    np.testing.assert_array_equal(ds.is_noisy, expected)
    assert not ds.is_noisy[~ds.mask("novel_train")].any()


def test_noise_keeps_base_and_test_records():
    clean = generate_dataset(DatasetSpec(seed=9))
    noisy = inject_web_noise(clean, NoiseSpec(0.3, seed=9))
    keep = ~clean.mask("novel_train")
    np.testing.assert_array_equal(clean.features[keep], noisy.features[keep])


def test_outliers_lie_in_inflated_prototype_box():
    ds = inject_web_noise(generate_dataset(DatasetSpec(seed=10)), NoiseSpec(0.3, flip_fraction=0.0, seed=10))
    protos, inter = ds.geometry.prototypes, ds.geometry.inter_std
    out = ds.features[ds.noise_kinds == "outlier"]
    assert np.all(out >= protos.min(axis=0) - 3 * inter)
    assert np.all(out <= protos.max(axis=0) + 3 * inter)


def test_single_novel_category_cannot_flip():
    ds = generate_dataset(DatasetSpec(n_novel_categories=1))
    with pytest.raises(ConfigurationError):
        inject_web_noise(ds, NoiseSpec(0.3, flip_fraction=0.5))
    inject_web_noise(ds, NoiseSpec(0.3, flip_fraction=0.0))


@pytest.mark.parametrize("cb,cn,cv", [(150, 50, 37), (10, 10, 5), (5, 0, 0), (15, 5, 3)])
def test_split_validation(cb, cn, cv):
    assert split_validation(cb, cn) == cv


def test_round_trip(tmp_path):
    ds = inject_web_noise(generate_dataset(SMALL), NoiseSpec(0.3, seed=2))
    save_dataset(ds, tmp_path / "d.txt")
    assert load_dataset(tmp_path / "d.txt") == ds


def test_empty_round_trip(tmp_path):
    ds = generate_dataset(SMALL).subset(np.zeros(90, dtype=bool))
    save_dataset(ds, tmp_path / "e.txt")
    assert (tmp_path / "e.txt").read_text() == "dim=3\n"
    back = load_dataset(tmp_path / "e.txt")
    assert len(back) == 0 and back == ds


def test_parse_error_names_line(tmp_path):
    ds = generate_dataset(SMALL)
    save_dataset(ds, tmp_path / "d.txt")
    lines = (tmp_path / "d.txt").read_text().splitlines()
    lines[6] = lines[6] + ",1.0"
    (tmp_path / "bad.txt").write_text("\n".join(lines) + "\n")
    with pytest.raises(DatasetFormatError, match="line 7"):
        load_dataset(tmp_path / "bad.txt")
