import struct

import numpy as np
import pytest

from privfed.data import (
    ClientShard,
    CountMismatchError,
    Dataset,
    EmptyFileError,
    MagicNumberError,
    MissingColumnError,
    NonNumericCellError,
    TruncatedFileError,
    load_csv,
    load_idx,
    make_shards,
    rescale_unit,
    sample_batch,
    synthetic_blobs,
)
from privfed.streams import RandomStream


def write_idx_pair(tmp_path, images, labels, image_magic=0x803, label_magic=0x801,
                   trailing=b""):
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, rows, cols = images.shape
    ip = tmp_path / "images.idx"
    lp = tmp_path / "labels.idx"
    ip.write_bytes(struct.pack(">IIII", image_magic, n, rows, cols) + images.tobytes() + trailing)
    lp.write_bytes(struct.pack(">II", label_magic, len(labels)) + labels.tobytes())
    return str(ip), str(lp)


def test_idx_round_trip(tmp_path):
    images = np.arange(2 * 3 * 4, dtype=np.uint8).reshape(2, 3, 4)
    ip, lp = write_idx_pair(tmp_path, images, [1, 3])
    ds = load_idx(ip, lp, name="toy")
    assert ds.name == "toy"
    assert ds.feature_shape == (3, 4, 1)
    assert ds.num_classes == 4
    assert np.array_equal(ds.labels, [1, 3])
    assert np.allclose(ds.features, images[..., None] / 255.0)
    assert ds.features.dtype == np.float64


def test_idx_bad_image_magic(tmp_path):
    ip, lp = write_idx_pair(tmp_path, np.zeros((1, 2, 2), dtype=np.uint8), [0], image_magic=0x804)
    with pytest.raises(MagicNumberError):
        load_idx(ip, lp)


def test_idx_bad_label_magic(tmp_path):
    ip, lp = write_idx_pair(tmp_path, np.zeros((1, 2, 2), dtype=np.uint8), [0], label_magic=0x803)
    with pytest.raises(MagicNumberError):
        load_idx(ip, lp)


def test_idx_truncated_pixels(tmp_path):
    ip, lp = write_idx_pair(tmp_path, np.zeros((2, 2, 2), dtype=np.uint8), [0, 1])
    raw = open(ip, "rb").read()
    open(ip, "wb").write(raw[:-3])
    with pytest.raises(TruncatedFileError):
        load_idx(ip, lp)


def test_idx_trailing_bytes(tmp_path):
    ip, lp = write_idx_pair(tmp_path, np.zeros((1, 2, 2), dtype=np.uint8), [0], trailing=b"x")
    with pytest.raises(TruncatedFileError):
        load_idx(ip, lp)


def test_idx_count_mismatch(tmp_path):
    ip, lp = write_idx_pair(tmp_path, np.zeros((2, 2, 2), dtype=np.uint8), [0, 1, 1])
    with pytest.raises(CountMismatchError):
        load_idx(ip, lp)


def write_csv(tmp_path, text):
    p = tmp_path / "table.csv"
    p.write_text(text)
    return str(p)


def test_csv_basic_scaling(tmp_path):
    path = write_csv(tmp_path, "a,b,y\n1,10,yes\n3,10,no\n2,10,yes\n")
    ds = load_csv(path, "y")
    assert ds.num_classes == 2
    # labels sorted: no=0, yes=1
    assert np.array_equal(ds.labels, [1, 0, 1])
    # column a min-max scaled, constant column b maps to 0
    assert np.allclose(ds.features, [[0.0, 0.0], [1.0, 0.0], [0.5, 0.0]])


def test_csv_one_hot(tmp_path):
    path = write_csv(tmp_path, "color,x,y\nred,1,0\nblue,2,0\nred,3,1\n")
    ds = load_csv(path, "y", categorical=("color",))
    # categories sorted: blue, red
    assert np.allclose(ds.features[:, :2], [[0, 1], [1, 0], [0, 1]])
    assert np.allclose(ds.features[:, 2], [0.0, 0.5, 1.0])


def test_csv_skips_blank_lines(tmp_path):
    path = write_csv(tmp_path, "a,y\n\n1,0\n\n2,1\n\n")
    assert len(load_csv(path, "y")) == 2


def test_csv_errors(tmp_path):
    with pytest.raises(EmptyFileError):
        load_csv(write_csv(tmp_path, ""), "y")
    with pytest.raises(EmptyFileError):
        load_csv(write_csv(tmp_path, "a,y\n"), "y")
    with pytest.raises(MissingColumnError):
        load_csv(write_csv(tmp_path, "a,y\n1,0\n"), "z")
    with pytest.raises(MissingColumnError):
        load_csv(write_csv(tmp_path, "a,y\n1,0\n"), "y", categorical=("c",))
    with pytest.raises(CountMismatchError):
        load_csv(write_csv(tmp_path, "a,y\n1,0,9\n"), "y")
    with pytest.raises(NonNumericCellError):
        load_csv(write_csv(tmp_path, "a,y\nfoo,0\n"), "y")


def test_dataset_validation():
    with pytest.raises(CountMismatchError):
        Dataset("bad", np.zeros((3, 2)), np.zeros(2, dtype=np.int64), 2)
    with pytest.raises(ValueError):
        Dataset("bad", np.zeros((2, 2)), np.zeros(2, dtype=np.int64), 0)


def test_dataset_subset():
    ds = synthetic_blobs(2, 5, 4, 3.0, seed=0)
    sub = ds.subset([1, 3, 9])
    assert len(sub) == 3
    assert np.array_equal(sub.features, ds.features[[1, 3, 9]])
    assert np.array_equal(sub.labels, ds.labels[[1, 3, 9]])


def test_blobs_geometry_and_determinism():
    ds = synthetic_blobs(num_classes=3, per_class=50, dim=8, separation=6.0, seed=4)
    assert len(ds) == 150
    assert ds.feature_shape == (8,)
    assert np.array_equal(ds.labels, np.repeat([0, 1, 2], 50))
    centers = np.stack([ds.features[ds.labels == z].mean(axis=0) for z in range(3)])
    for i in range(3):
        for j in range(i + 1, 3):
            assert abs(np.linalg.norm(centers[i] - centers[j]) - 6.0) < 0.6
    again = synthetic_blobs(num_classes=3, per_class=50, dim=8, separation=6.0, seed=4)
    assert np.array_equal(ds.features, again.features)


def test_blobs_validation():
    with pytest.raises(ValueError):
        synthetic_blobs(1, 5, 4, 3.0, 0)
    with pytest.raises(ValueError):
        synthetic_blobs(2, 0, 4, 3.0, 0)
    with pytest.raises(ValueError):
        synthetic_blobs(3, 5, 2, 3.0, 0)
    with pytest.raises(ValueError):
        synthetic_blobs(2, 5, 4, 0.0, 0)


def test_rescale_unit():
    ds = synthetic_blobs(2, 20, 4, 5.0, seed=1)
    scaled = rescale_unit(ds)
    assert scaled.features.min() == 0.0
    assert scaled.features.max() == 1.0
    # affine, so relative geometry survives
    span = ds.features.max() - ds.features.min()
    assert np.allclose(scaled.features, (ds.features - ds.features.min()) / span)
    flat = Dataset("const", np.full((3, 2), 7.0), np.zeros(3, dtype=np.int64), 1)
    assert np.all(rescale_unit(flat).features == 0.0)


def test_make_shards_disjoint():
    ds = synthetic_blobs(4, 30, 8, 4.0, seed=2)
    shards = make_shards(ds, clients=10, per_client=9, classes_per_client=2, seed=3)
    assert len(shards) == 10
    seen = []
    for k, shard in enumerate(shards):
        assert shard.client_id == k
        assert len(shard) == 9
        assert len(np.unique(shard.labels)) == 2
        for row in shard.features:
            matches = np.flatnonzero((ds.features == row).all(axis=1))
            assert len(matches) == 1
            seen.append(matches[0])
    assert len(set(seen)) == len(seen)  # disjoint across clients


def test_make_shards_exhaustion():
    ds = synthetic_blobs(2, 10, 4, 4.0, seed=5)
    with pytest.raises(ValueError, match="exhausted"):
        make_shards(ds, clients=5, per_client=10, classes_per_client=1, seed=0)


def test_make_shards_overlapping_full_copy():
    ds = synthetic_blobs(2, 10, 4, 4.0, seed=6)
    shards = make_shards(ds, clients=4, per_client=20, classes_per_client=2, seed=7,
                         disjoint=False)
    for shard in shards:
        assert len(shard) == 20
        assert sorted(np.unique(shard.labels)) == [0, 1]


def test_make_shards_uneven_split():
    ds = synthetic_blobs(3, 20, 4, 4.0, seed=8)
    shards = make_shards(ds, clients=3, per_client=7, classes_per_client=3, seed=9)
    for shard in shards:
        counts = np.bincount(shard.labels, minlength=3)
        assert sorted(counts) == [2, 2, 3]


def test_make_shards_validation():
    ds = synthetic_blobs(2, 10, 4, 4.0, seed=10)
    with pytest.raises(ValueError):
        make_shards(ds, 0, 5, 1, seed=0)
    with pytest.raises(ValueError):
        make_shards(ds, 2, 0, 1, seed=0)
    with pytest.raises(ValueError):
        make_shards(ds, 2, 5, 3, seed=0)
    with pytest.raises(ValueError):
        make_shards(ds, 2, 1, 2, seed=0)


def test_shard_validation():
    with pytest.raises(ValueError):
        ClientShard(0, np.zeros((0, 2)), np.zeros(0, dtype=np.int64))
    with pytest.raises(ValueError):
        ClientShard(0, np.zeros((2, 2)), np.zeros(3, dtype=np.int64))


def test_sample_batch_deterministic_with_replacement():
    ds = synthetic_blobs(2, 6, 4, 4.0, seed=11)
    shard = make_shards(ds, 1, 12, 2, seed=12)[0]
    stream = RandomStream(13).child("batch")
    xs, ys = sample_batch(shard, 40, stream)
    assert xs.shape == (40, 4) and ys.shape == (40,)
    xs2, ys2 = sample_batch(shard, 40, stream)
    assert np.array_equal(xs, xs2) and np.array_equal(ys, ys2)
    # 40 draws from 12 examples must repeat
    assert len(np.unique(xs, axis=0)) < 40
    with pytest.raises(ValueError):
        sample_batch(shard, 0, stream)
