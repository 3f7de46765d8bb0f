import struct

import numpy as np
import pytest

from fedexit.data import (ClientShard, CorruptionSpec, Dataset, IdxCountMismatchError,
                          IdxMagicError, IdxTruncatedError, PartitionSpec, corrupt,
                          load_idx, partition, shard_label_entropy, synth_dataset)


def test_synth_shapes_range_and_balance():
    ds = synth_dataset(64, 8, image_size=16, channels=1, cluster_std=0.3)
    assert ds.inputs.shape == (64, 1, 16, 16)
    assert ds.inputs.dtype == np.float32
    assert ds.inputs.min() >= 0.0 and ds.inputs.max() <= 1.0
    counts = np.bincount(ds.labels, minlength=8)
    assert counts.tolist() == [8] * 8


def test_synth_deterministic_and_seed_sensitive():
    a = synth_dataset(32, 4, label_map_seed=7, noise_seed=3)
    b = synth_dataset(32, 4, label_map_seed=7, noise_seed=3)
    assert np.array_equal(a.inputs, b.inputs)
    c = synth_dataset(32, 4, label_map_seed=8, noise_seed=3)
    d = synth_dataset(32, 4, label_map_seed=7, noise_seed=4)
    assert not np.array_equal(a.inputs, c.inputs)
    assert not np.array_equal(a.inputs, d.inputs)
    assert np.array_equal(a.labels, c.labels)


def test_synth_zero_noise_repeats_templates():
    ds = synth_dataset(8, 4, cluster_std=0.0)
    # samples 0 and 4 share class 0's template exactly
    assert np.array_equal(ds.inputs[0], ds.inputs[4])
    assert not np.array_equal(ds.inputs[0], ds.inputs[1])


def _write_idx_pair(tmp_path, images: np.ndarray, labels: np.ndarray):
    n, rows, cols = images.shape
    ipath = tmp_path / "imgs.idx3-ubyte"
    lpath = tmp_path / "labels.idx1-ubyte"
    ipath.write_bytes(struct.pack(">IIII", 0x00000803, n, rows, cols) + images.tobytes())
    lpath.write_bytes(struct.pack(">II", 0x00000801, len(labels)) + labels.tobytes())
    return str(ipath), str(lpath)


def test_idx_roundtrip_and_scaling(tmp_path):
    rng = np.random.default_rng(0)
    imgs = rng.integers(0, 256, size=(5, 4, 4), dtype=np.uint8)
    imgs[0, 0, 0] = 255
    imgs[1, 0, 0] = 0
    labels = np.array([0, 1, 2, 1, 0], dtype=np.uint8)
    ipath, lpath = _write_idx_pair(tmp_path, imgs, labels)
    ds = load_idx(ipath, lpath)
    assert ds.inputs.shape == (5, 1, 4, 4)
    assert ds.inputs[0, 0, 0, 0] == 1.0
    assert ds.inputs[1, 0, 0, 0] == 0.0
    np.testing.assert_allclose(ds.inputs[2, 0], imgs[2] / 255.0, rtol=1e-6)
    assert ds.labels.tolist() == [0, 1, 2, 1, 0]
    assert ds.num_classes == 3


def test_idx_bad_magic(tmp_path):
    imgs = np.zeros((2, 3, 3), dtype=np.uint8)
    labels = np.zeros(2, dtype=np.uint8)
    ipath, lpath = _write_idx_pair(tmp_path, imgs, labels)
    bad = tmp_path / "bad.idx"
    bad.write_bytes(struct.pack(">IIII", 0xDEADBEEF, 2, 3, 3) + imgs.tobytes())
    with pytest.raises(IdxMagicError):
        load_idx(str(bad), lpath)


def test_idx_truncated(tmp_path):
    imgs = np.zeros((4, 3, 3), dtype=np.uint8)
    labels = np.zeros(4, dtype=np.uint8)
    ipath, lpath = _write_idx_pair(tmp_path, imgs, labels)
    short = tmp_path / "short.idx"
    short.write_bytes(struct.pack(">IIII", 0x00000803, 4, 3, 3) + imgs.tobytes()[:10])
    with pytest.raises(IdxTruncatedError):
        load_idx(str(short), lpath)


def test_idx_count_mismatch(tmp_path):
    imgs = np.zeros((3, 2, 2), dtype=np.uint8)
    labels = np.zeros(5, dtype=np.uint8)
    ipath, lpath = _write_idx_pair(tmp_path, imgs, labels)
    with pytest.raises(IdxCountMismatchError):
        load_idx(ipath, lpath)


def _coverage(shards, n):
    allidx = np.concatenate([s.indices for s in shards])
    assert len(allidx) == n
    assert len(np.unique(allidx)) == n


@pytest.mark.parametrize("alpha", [0.05, 0.5, 10.0])
def test_lda_partition_covers_disjointly_with_no_empty_shards(alpha):
    ds = synth_dataset(400, 10)
    shards = partition(ds, PartitionSpec(20, "lda", alpha=alpha, seed=5))
    _coverage(shards, 400)
    assert min(len(s) for s in shards) >= 1
    assert [s.client_id for s in shards] == list(range(20))


def test_lda_partition_deterministic():
    ds = synth_dataset(200, 5)
    a = partition(ds, PartitionSpec(8, "lda", alpha=0.2, seed=3))
    b = partition(ds, PartitionSpec(8, "lda", alpha=0.2, seed=3))
    for x, y in zip(a, b):
        assert np.array_equal(x.indices, y.indices)
    c = partition(ds, PartitionSpec(8, "lda", alpha=0.2, seed=4))
    assert any(not np.array_equal(x.indices, y.indices) for x, y in zip(a, c))


def test_iid_partition_near_equal():
    ds = synth_dataset(103, 5)
    shards = partition(ds, PartitionSpec(10, "iid", seed=0))
    _coverage(shards, 103)
    sizes = [len(s) for s in shards]
    assert max(sizes) - min(sizes) <= 1


def test_partition_rejects_more_clients_than_samples():
    ds = synth_dataset(5, 5)
    with pytest.raises(ValueError):
        partition(ds, PartitionSpec(6))


def test_shard_entropy_hand_case():
    ds = Dataset(np.zeros((3, 1, 2, 2), dtype=np.float32), np.array([0, 0, 1]), 2)
    shards = [ClientShard(0, np.array([0, 1, 2]))]
    p = np.array([2 / 3, 1 / 3])
    want = float(-(p * np.log(p)).sum())
    assert shard_label_entropy(ds, shards) == pytest.approx(want, rel=1e-12)


def test_dirichlet_alpha_controls_skew():
    # Monte Carlo oracle: smaller alpha must give lower mean label entropy
    ds = synth_dataset(2000, 10)
    means = {}
    for alpha in (0.1, 1.0, 1000.0):
        vals = [shard_label_entropy(ds, partition(ds, PartitionSpec(10, "lda", alpha, seed=s)))
                for s in range(20)]
        means[alpha] = float(np.mean(vals))
    assert means[0.1] < means[1.0] < means[1000.0]


def test_corrupt_severity_zero_is_identity():
    ds = synth_dataset(16, 4)
    out = corrupt(ds, CorruptionSpec(0, seed=1))
    assert np.array_equal(out.inputs, ds.inputs)


def test_corrupt_deterministic_and_clipped():
    ds = synth_dataset(16, 4)
    a = corrupt(ds, CorruptionSpec(3, seed=9))
    b = corrupt(ds, CorruptionSpec(3, seed=9))
    assert np.array_equal(a.inputs, b.inputs)
    assert a.inputs.min() >= 0.0 and a.inputs.max() <= 1.0
    assert not np.array_equal(a.inputs, ds.inputs)
    assert np.array_equal(a.labels, ds.labels)
    c = corrupt(ds, CorruptionSpec(3, seed=10))
    assert not np.array_equal(a.inputs, c.inputs)


def test_corrupt_severity_scales_distortion():
    ds = synth_dataset(64, 4, cluster_std=0.0)
    deltas = []
    for s in (1, 3, 5):
        out = corrupt(ds, CorruptionSpec(s, seed=2))
        deltas.append(float(np.abs(out.inputs - ds.inputs).mean()))
    assert deltas[0] < deltas[1] < deltas[2]


def test_corrupt_accepts_tuple_seed():
    ds = synth_dataset(8, 4)
    a = corrupt(ds, CorruptionSpec(2, seed=(5, 7)))
    b = corrupt(ds, CorruptionSpec(2, seed=(5, 7)))
    assert np.array_equal(a.inputs, b.inputs)


def test_corruption_spec_validation():
    with pytest.raises(ValueError):
        CorruptionSpec(6)
    with pytest.raises(ValueError):
        CorruptionSpec(-1)


def test_subset_picks_rows():
    ds = synth_dataset(10, 5)
    sub = ds.subset([1, 3, 5])
    assert len(sub) == 3
    assert np.array_equal(sub.labels, ds.labels[[1, 3, 5]])
    assert np.array_equal(sub.inputs[0], ds.inputs[1])
