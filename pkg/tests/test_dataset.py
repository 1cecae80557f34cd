from collections import Counter

import numpy as np
import pytest
from PIL import Image

from mlpmatch.dataset import (
    IGNORE_INDEX,
    Sample,
    SplitSpec,
    SyntheticSpec,
    generate_synthetic,
    load_voc_dir,
    make_epoch_iterator,
    make_synthetic_split,
    read_split_file,
    steps_per_epoch,
    write_voc_dir,
)
from mlpmatch.errors import ConfigError, DataError


def test_synthetic_is_deterministic():
    a = generate_synthetic(SyntheticSpec(seed=7), 4)
    b = generate_synthetic(SyntheticSpec(seed=7), 4)
    for x, y in zip(a, b):
        assert x.id == y.id
        assert np.array_equal(x.image, y.image)
        assert np.array_equal(x.label, y.label)


def test_synthetic_seed_changes_output():
    a = generate_synthetic(SyntheticSpec(seed=1), 1)[0]
    b = generate_synthetic(SyntheticSpec(seed=2), 1)[0]
    assert not np.array_equal(a.image, b.image)


def test_two_class_single_shape_has_both_classes():
    samples = generate_synthetic(SyntheticSpec(num_classes=2, shapes_per_image=(1, 1)), 100)
    for s in samples:
        assert set(np.unique(s.label)) == {0, 1}


def test_synthetic_shape_and_range():
    for s in generate_synthetic(SyntheticSpec(image_size=64), 10):
        assert s.image.shape == (64, 64, 3)
        assert s.image.min() >= 0.0 and s.image.max() <= 1.0
        assert s.label.shape == (64, 64)


def test_every_class_realizable_and_labels_valid():
    spec = SyntheticSpec(num_classes=6)
    seen = set()
    for s in generate_synthetic(spec, 60):
        values = set(np.unique(s.label).tolist())
        assert values <= set(range(6))
        seen |= values
    assert seen == set(range(6))


@pytest.mark.parametrize("spec", [
    SyntheticSpec(num_classes=1),
    SyntheticSpec(image_size=2),
    SyntheticSpec(shapes_per_image=(3, 1)),
])
def test_invalid_synthetic_spec(spec):
    with pytest.raises(ConfigError):
        generate_synthetic(spec, 1)


def test_synthetic_split_disjoint_and_unlabeled():
    x, u, e = make_synthetic_split(SyntheticSpec(), 3, 5, 2)
    ids = [s.id for s in x + u + e]
    assert len(set(ids)) == 10
    assert all(s.label is None for s in u)
    assert all(s.label is not None for s in x + e)


def test_sample_shape_mismatch():
    with pytest.raises(DataError):
        Sample(np.zeros((4, 4, 3), np.float32), np.zeros((4, 5), np.int64), "bad")


def _voc(tmp_path, n=3):
    samples = generate_synthetic(SyntheticSpec(image_size=16), n)
    samples[0].label[0, :3] = IGNORE_INDEX
    write_voc_dir(tmp_path, {"train": samples}, num_classes=4)
    return samples


def test_voc_roundtrip_preserves_ignore(tmp_path):
    samples = _voc(tmp_path)
    split = SplitSpec(read_split_file(tmp_path / "train.txt"), [], 4)
    labeled, unlabeled = load_voc_dir(tmp_path, split)
    assert unlabeled == []
    assert np.array_equal(labeled[0].label, samples[0].label)
    assert (labeled[0].label[0, :3] == IGNORE_INDEX).all()
    assert 0.0 <= labeled[0].image.min() and labeled[0].image.max() <= 1.0
    np.testing.assert_allclose(labeled[1].image, samples[1].image, atol=0.5 / 255 + 1e-6)


def test_voc_missing_id_named(tmp_path):
    _voc(tmp_path)
    split = SplitSpec(["syn0_00000", "ghost_42"], [], 4)
    with pytest.raises(DataError, match="ghost_42"):
        load_voc_dir(tmp_path, split)


def test_voc_bad_mask_value(tmp_path):
    _voc(tmp_path)
    mask = Image.fromarray(np.full((16, 16), 9, np.uint8), "P")
    mask.putpalette(list(range(256)) * 3)
    mask.save(tmp_path / "masks" / "syn0_00001.png")
    with pytest.raises(DataError, match="syn0_00001"):
        load_voc_dir(tmp_path, SplitSpec(["syn0_00001"], [], 4))


def test_voc_rejects_rgb_mask(tmp_path):
    _voc(tmp_path)
    Image.fromarray(np.zeros((16, 16, 3), np.uint8), "RGB").save(tmp_path / "masks" / "syn0_00002.png")
    with pytest.raises(DataError, match="palette"):
        load_voc_dir(tmp_path, SplitSpec(["syn0_00002"], [], 4))


def _fake(n, prefix):
    return [Sample(np.zeros((2, 2, 3), np.float32), None, f"{prefix}{i}") for i in range(n)]


def test_steps_per_epoch():
    assert steps_per_epoch(32, 16) == 4
    assert steps_per_epoch(33, 16) == 5
    assert len(list(make_epoch_iterator(_fake(4, "x"), _fake(32, "u"), 16, seed=0))) == 4


def test_labeled_cycle_counts():
    # 4 steps x 8 labeled slots over 4 labeled samples
    counts = Counter(s.id for xb, _ in make_epoch_iterator(_fake(4, "x"), _fake(32, "u"), 16, seed=3)
                     for s in xb)
    assert counts == {f"x{i}": 8 for i in range(4)}


def test_unlabeled_each_once_per_epoch():
    ids = [s.id for _, ub in make_epoch_iterator(_fake(3, "x"), _fake(20, "u"), 8, seed=0) for s in ub]
    assert sorted(ids) == sorted(f"u{i}" for i in range(20))


def test_iterator_deterministic():
    def run(seed, epoch=0):
        return [([s.id for s in a], [s.id for s in b])
                for a, b in make_epoch_iterator(_fake(5, "x"), _fake(16, "u"), 8, seed, epoch)]
    assert run(11) == run(11)
    assert run(11) != run(12)
    assert run(11, 0) != run(11, 1)


def test_iterator_errors():
    with pytest.raises(ConfigError):
        make_epoch_iterator([], _fake(4, "u"), 4, 0)
    with pytest.raises(ConfigError):
        make_epoch_iterator(_fake(2, "x"), _fake(4, "u"), 5, 0)
    with pytest.raises(ConfigError):
        make_epoch_iterator(_fake(2, "x"), _fake(2, "x"), 4, 0)


def test_split_spec_disjoint():
    with pytest.raises(ConfigError):
        SplitSpec(["a", "b"], ["b"], 3).validate()
    with pytest.raises(ConfigError):
        SplitSpec([], ["b"], 3).validate()
