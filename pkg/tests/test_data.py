import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from manifold_gan.data import (SyntheticManifoldSpec, batches, canonical_order, idx_dump, idx_load,
                               idx_parse, idx_write, labeled_batches, load_dataset, make_split,
                               pixels_to_bytes, synth_sample)
from manifold_gan.errors import ConfigError, ContractViolation, FormatError

from conftest import moons_config

IMAGE_FIXTURE = bytes.fromhex("00000803 00000001 00000002 00000002 0080FF40".replace(" ", ""))
LABEL_FIXTURE = bytes.fromhex("00000801 00000003 000102".replace(" ", ""))


# -- IDX ------------------------------------------------------------------------------

def test_idx_image_fixture():
    img = idx_parse(IMAGE_FIXTURE)
    assert img.shape == (1, 2, 2)
    np.testing.assert_allclose(img.reshape(-1), [-1.0, 0.00392, 1.0, -0.49804], atol=5e-6)
    assert img[0, 0, 0] == -1.0 and img[0, 1, 0] == 1.0


def test_idx_label_fixture():
    labels = idx_parse(LABEL_FIXTURE)
    np.testing.assert_array_equal(labels, [0, 1, 2])
    assert labels.dtype == np.int64


def test_idx_wrong_magic():
    with pytest.raises(FormatError, match="0x00000903.*0x00000803"):
        idx_parse(bytes.fromhex("00000903") + IMAGE_FIXTURE[4:])


def test_idx_truncated_payload():
    with pytest.raises(FormatError, match="expected 20 bytes, found 19"):
        idx_parse(IMAGE_FIXTURE[:-1])


def test_idx_file_round_trip(tmp_path):
    for raw in (IMAGE_FIXTURE, LABEL_FIXTURE):
        arr = idx_parse(raw)
        path = tmp_path / "f.idx"
        idx_write(path, pixels_to_bytes(arr) if arr.dtype != np.int64 else arr)
        assert path.read_bytes() == raw
        np.testing.assert_array_equal(idx_load(path), arr)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 4), st.integers(1, 5), st.integers(1, 5), st.data())
def test_property_idx_round_trip(n, h, w, data):
    flat = data.draw(st.lists(st.integers(0, 255), min_size=n * h * w, max_size=n * h * w))
    raw = idx_dump(np.array(flat, dtype=np.uint8).reshape(n, h, w))
    assert idx_dump(pixels_to_bytes(idx_parse(raw))) == raw


# -- synthetic manifolds -------------------------------------------------------------------

def test_circle_on_unit_circle():
    x, y = synth_sample(SyntheticManifoldSpec("circle", 500, 0.0), 0)
    np.testing.assert_allclose(np.linalg.norm(x, axis=1), 1.0, atol=1e-12)
    np.testing.assert_array_equal(y, (x[:, 0] >= 0).astype(int))


def _best_linear_probe_error(x, y, n_angles=720):
    """Brute force over directions and thresholds: the best any line can do."""
    best = 1.0
    for theta in np.linspace(0, np.pi, n_angles, endpoint=False):
        proj = x @ np.array([np.cos(theta), np.sin(theta)])
        order = np.argsort(proj)
        ys = y[order]
        # error when predicting 1 above each split point, and the flipped rule
        ones_below = np.r_[0, np.cumsum(ys)]
        zeros_above = np.r_[np.sum(ys == 0), np.sum(ys == 0) - np.cumsum(ys == 0)]
        err = (ones_below + zeros_above) / len(y)
        best = min(best, err.min(), (1 - err).min())
    return best


def test_two_moons_not_linearly_separable():
    x, y = synth_sample(SyntheticManifoldSpec("two-moons", 400, 0.0), 0)
    assert _best_linear_probe_error(x, y) > 0.10


@pytest.mark.parametrize("kind", ["circle", "two-moons", "swiss-roll-2d"])
def test_synthetic_balance_and_range(kind):
    x, y = synth_sample(SyntheticManifoldSpec(kind, 300, 0.3), 5)
    assert abs(np.sum(y == 0) - np.sum(y == 1)) <= 1
    assert np.abs(x).max() <= 1.0
    x2, y2 = synth_sample(SyntheticManifoldSpec(kind, 300, 0.3), 5)
    np.testing.assert_array_equal(x, x2)


def test_synthetic_spec_validation():
    with pytest.raises(ContractViolation):
        SyntheticManifoldSpec("spiral")
    with pytest.raises(ContractViolation):
        SyntheticManifoldSpec("circle", noise=-0.1)


# -- splits ------------------------------------------------------------------------------

def _labeled_data(n=200, k=10, seed=0):
    rng = np.random.default_rng(seed)
    return rng.uniform(-1, 1, (n, 3)), np.arange(n) % k


def test_split_one_per_class():
    x, y = _labeled_data()
    s = make_split(x, y, 10, 20, seed=1)
    np.testing.assert_array_equal(np.sort(s.y_labeled), np.arange(10))


def test_split_deterministic():
    x, y = _labeled_data()
    a, b = make_split(x, y, 20, 30, 4), make_split(x, y, 20, 30, 4)
    for f in ("labeled_idx", "unlabeled_idx", "validation_idx"):
        np.testing.assert_array_equal(getattr(a, f), getattr(b, f))
    c = make_split(x, y, 20, 30, 5)
    assert not np.array_equal(a.validation_idx, c.validation_idx)


def test_split_partition():
    x, y = _labeled_data()
    s = make_split(x, y, 20, 30, 2)
    both = np.sort(np.r_[s.validation_idx, s.unlabeled_idx])
    np.testing.assert_array_equal(both, np.arange(len(x)))
    assert set(s.labeled_idx) <= set(s.unlabeled_idx)
    assert not set(s.validation_idx) & set(s.unlabeled_idx)


def test_split_insufficient_class():
    x, y = _labeled_data(40, 10)
    with pytest.raises(ContractViolation):
        make_split(x, y, 50, 0, 0)
    with pytest.raises(ContractViolation):
        make_split(x, y, 15, 0, 0)


def test_split_order_invariant():
    x, y = _labeled_data()
    perm = np.random.default_rng(9).permutation(len(x))
    a = make_split(x, y, 20, 30, 3)
    b = make_split(x[perm], y[perm], 20, 30, 3)
    np.testing.assert_array_equal(a.x_labeled[np.lexsort(a.x_labeled.T)], b.x_labeled[np.lexsort(b.x_labeled.T)])
    np.testing.assert_array_equal(np.sort(a.x_validation, axis=0), np.sort(b.x_validation, axis=0))


def test_canonical_order_sorts_by_label_first():
    x = np.array([[0.5], [0.1], [0.9]])
    y = np.array([1, 1, 0])
    np.testing.assert_array_equal(canonical_order(x, y), [2, 1, 0])


def test_merged_folds_validation_back():
    x, y = _labeled_data()
    s = make_split(x, y, 20, 30, 2).merged()
    assert len(s.x_validation) == 0
    assert len(s.x_unlabeled) == len(x)


# -- batching ------------------------------------------------------------------------------

def test_batches_cover_all():
    bs = list(batches(100, 25, 0, 0))
    assert len(bs) == 4
    np.testing.assert_array_equal(np.sort(np.concatenate(bs)), np.arange(100))


def test_batches_drop_tail():
    assert [len(b) for b in batches(103, 25, 0, 0)] == [25] * 4


def test_batches_deterministic_and_epoch_dependent():
    first = np.concatenate(list(batches(50, 10, 3, 0)))
    np.testing.assert_array_equal(first, np.concatenate(list(batches(50, 10, 3, 0))))
    orders = {np.concatenate(list(batches(20, 5, 3, e))).tobytes() for e in range(100)}
    assert len(orders) == 100


def test_batches_errors():
    with pytest.raises(ContractViolation):
        list(batches(0, 5, 0, 0))
    with pytest.raises(ContractViolation):
        list(batches(10, 0, 0, 0))


def test_labeled_batches_resample_when_small():
    lab = labeled_batches(8, 25, 4, 0, 0)
    assert len(lab) == 4 and all(len(b) == 25 for b in lab)
    assert np.concatenate(lab).max() < 8
    lab = labeled_batches(200, 25, 4, 0, 0)
    flat = np.concatenate(lab)
    assert len(set(flat)) == 100


# -- config-driven loading ----------------------------------------------------------------

def test_load_dataset_synthetic():
    cfg = moons_config()
    s = load_dataset(cfg)
    assert len(s.x_labeled) == 8 and len(s.x_validation) == 50 and len(s.x_test) == 100
    assert s.x_unlabeled.shape[1:] == (2,)


def test_load_dataset_idx(tmp_path):
    rng = np.random.default_rng(0)
    imgs = rng.integers(0, 256, (40, 8, 8))
    labels = np.arange(40) % 4
    for name, arr in (("tr-img", imgs), ("tr-lab", labels), ("te-img", imgs[:10]), ("te-lab", labels[:10])):
        idx_write(tmp_path / name, arr)
    cfg = moons_config(**{"dataset.kind": "idx", "dataset.train_images": str(tmp_path / "tr-img"),
                          "dataset.train_labels": str(tmp_path / "tr-lab"),
                          "dataset.test_images": str(tmp_path / "te-img"),
                          "dataset.test_labels": str(tmp_path / "te-lab"),
                          "dataset.n_labeled": 8, "dataset.n_validation": 4,
                          "model.profile": "conv-small", "model.num_classes": 4})
    s = load_dataset(cfg)
    assert s.x_unlabeled.shape[1:] == (1, 8, 8)
    assert s.x_unlabeled.min() >= -1 and s.x_unlabeled.max() <= 1


def test_load_dataset_missing_file():
    cfg = moons_config(**{"dataset.kind": "idx"})
    with pytest.raises(ConfigError) as err:
        load_dataset(cfg)
    assert err.value.field == "dataset.train_images"
