import numpy as np
import pytest
from sklearn.neighbors import NearestCentroid

from msdg import data
from msdg.data import DataError, SceneRaster, SyntheticSpec


@pytest.fixture(scope="module")
def small_pair():
    return data.gen_synthetic(SyntheticSpec(n_classes=3, height=24, width=24, n1=5, n2=1, labeled=300,
                                            min_pixels=20, cells_per_class=2, seed=3))


def test_generation_is_deterministic(small_pair):
    again = data.gen_synthetic(SyntheticSpec(n_classes=3, height=24, width=24, n1=5, n2=1, labeled=300,
                                             min_pixels=20, cells_per_class=2, seed=3))
    for a, b in zip(small_pair, again):
        assert a.modality1.tobytes() == b.modality1.tobytes()
        assert a.labels.tobytes() == b.labels.tobytes()


def test_rasters_are_scaled_and_shaped(small_pair):
    for s in small_pair:
        assert s.channels == (5, 1) and (s.height, s.width) == (24, 24)
        assert s.modality1.min() >= 0 and s.modality1.max() <= 1


def test_every_class_labeled_in_both_scenes(small_pair):
    for s in small_pair:
        counts = np.bincount(s.labels.ravel(), minlength=4)[1:]
        assert counts.min() >= 10  # half of min_pixels per class is reserved for labels


def test_shift_changes_target_only():
    kw = dict(n_classes=3, height=24, width=24, n1=5, n2=1, labeled=300, min_pixels=20, cells_per_class=2, seed=5)
    s0, t0 = data.gen_synthetic(SyntheticSpec(shift=0.0, **kw))
    s1, t1 = data.gen_synthetic(SyntheticSpec(shift=2.0, **kw))
    assert s0.modality1.tobytes() == s1.modality1.tobytes()
    assert not np.array_equal(t0.modality1, t1.modality1)


def _transfer_accuracy(shift):
    src, tgt = data.gen_synthetic(SyntheticSpec(shift=shift, seed=4))
    m, mt = src.labels > 0, tgt.labels > 0
    nc = NearestCentroid().fit(src.modality1[m], src.labels[m])
    return nc.score(src.modality1[m], src.labels[m]), nc.score(tgt.modality1[mt], tgt.labels[mt])


def test_null_shift_means_same_distribution():
    on_source, on_target = _transfer_accuracy(0.0)
    assert on_source > 0.95 and abs(on_source - on_target) < 0.02


def test_shift_opens_a_gap():
    on_source, on_target = _transfer_accuracy(1.0)
    assert on_source - on_target > 0.2


def test_degenerate_specs():
    with pytest.raises(DataError):
        data.gen_synthetic(SyntheticSpec(n_classes=1))
    with pytest.raises(DataError):
        data.gen_synthetic(SyntheticSpec(n1=2, n2=2))
    with pytest.raises(DataError):
        data.gen_synthetic(SyntheticSpec(height=4))


def test_scene_round_trip(tmp_path, small_pair):
    src = small_pair[0]
    data.save_scene(src, tmp_path / "s")
    back = data.load_scene(tmp_path / "s")
    assert back.modality1.tobytes() == src.modality1.tobytes()
    assert back.modality2.tobytes() == src.modality2.tobytes()
    assert back.labels.tobytes() == src.labels.tobytes()
    meta = (tmp_path / "s" / "meta").read_text().split()
    assert meta == ["H=24", "W=24", "n1=5", "n2=1", "C=3"]


def test_load_errors(tmp_path, small_pair):
    with pytest.raises(DataError, match="meta"):
        data.load_scene(tmp_path)
    data.save_scene(small_pair[0], tmp_path / "s")
    (tmp_path / "s" / "meta").write_text("H=24\nW=25\nn1=5\nn2=1\nC=3\n")
    with pytest.raises(DataError, match="disagree"):
        data.load_scene(tmp_path / "s")
    (tmp_path / "s" / "meta").write_text("H=24\nW=24\n")
    with pytest.raises(DataError, match="missing"):
        data.load_scene(tmp_path / "s")
    (tmp_path / "s" / "meta").write_text("H=24\nW=24\nn1=5\nn2=1\nC=3\n")
    (tmp_path / "s" / "mod1.msdg").write_bytes(b"junk")
    with pytest.raises(DataError):
        data.load_scene(tmp_path / "s")


def toy_scene():
    m1 = np.arange(5 * 6 * 2, dtype=float).reshape(5, 6, 2)
    m2 = -np.arange(5 * 6, dtype=float).reshape(5, 6, 1)
    lab = np.zeros((5, 6), dtype=int)
    lab[2, 3] = 1
    lab[0, 0] = 2
    lab[4, 5] = 1
    return SceneRaster(m1, m2, lab, 2)


def test_interior_patch_is_raw_window():
    s = toy_scene()
    X1, X2, y, rc = data.extract_patches(s, 3)
    i = int(np.flatnonzero((rc == [2, 3]).all(1))[0])
    np.testing.assert_array_equal(X1[i], s.modality1[1:4, 2:5])
    np.testing.assert_array_equal(X2[i], s.modality2[1:4, 2:5])
    assert y[i] == 1


def test_corner_patch_is_mirrored():
    s = toy_scene()
    X1, _, y, rc = data.extract_patches(s, 3)
    i = int(np.flatnonzero((rc == [0, 0]).all(1))[0])
    idx = [1, 0, 1]  # reflect about the edge pixel
    np.testing.assert_array_equal(X1[i], s.modality1[np.ix_(idx, idx)])
    assert X1[i][1, 1].tolist() == s.modality1[0, 0].tolist() and y[i] == 2


def test_patch_count_and_iterator_agree():
    s = toy_scene()
    X1, X2, y, _ = data.extract_patches(s, 3)
    assert len(y) == s.labeled_count() == 3
    for (a, b, label), i in zip(data.iter_patches(s, 3), range(3)):
        np.testing.assert_array_equal(a, X1[i])
        np.testing.assert_array_equal(b, X2[i])
        assert label == y[i]
    assert len(data.extract_patches(s, 3, all_pixels=True)[2]) == 30


def test_even_patch_rejected():
    with pytest.raises(DataError):
        data.extract_patches(toy_scene(), 4)


def test_stratified_split(rng):
    y = np.repeat([0, 1, 2], [10, 20, 5])
    tr, va = data.stratified_split(y, 0.2, 0)
    assert sorted(np.concatenate([tr, va]).tolist()) == list(range(35))
    assert np.bincount(y[va]).tolist() == [2, 4, 1]


def test_minmax_scale_constant_channel():
    x = np.ones((2, 2, 1))
    np.testing.assert_array_equal(data.minmax_scale(x), 0.0)
