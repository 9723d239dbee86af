import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pfedmoe import data


def labelled(counts, dims=(1, 2, 2)):
    labels = np.repeat(np.arange(len(counts)), counts)
    images = np.arange(labels.size * int(np.prod(dims)), dtype=np.float64).reshape(labels.size, *dims)
    return data.Dataset(images, labels, len(counts))


partition_cases = st.tuples(
    st.lists(st.integers(20, 60), min_size=2, max_size=6),  # per-class sizes
    st.integers(1, 8),                                       # clients
    st.integers(0, 10_000),                                   # seed
    st.booleans(),                                            # pathological?
    st.integers(1, 3),                                        # k
)


def build_spec(num_classes, n, seed, patho, k):
    if patho:
        return data.PartitionSpec(data.Pathological(min(k, num_classes), 0.5), n, seed)
    return data.PartitionSpec(data.Practical(0.5), n, seed)


@settings(max_examples=40, deadline=None)
@given(partition_cases)
def test_partitions_conserve_samples_and_are_deterministic(case):
    counts, n, seed, patho, k = case
    ds = labelled(counts)
    spec = build_spec(len(counts), n, seed, patho, k)
    pools = data.partition(ds, spec)
    held = np.concatenate([p.index for p in pools])
    assert len(held) == len(set(held.tolist()))
    if not patho or n * spec.variant.classes_per_client >= len(counts):
        assert sorted(held.tolist()) == list(range(len(ds)))
    again = data.partition(ds, spec)
    assert all(np.array_equal(a.index, b.index) for a, b in zip(pools, again))


@settings(max_examples=40, deadline=None)
@given(partition_cases)
def test_pathological_clients_hold_exactly_k_classes(case):
    counts, n, seed, _, k = case
    k = min(k, len(counts))
    ds = labelled(counts)
    pools = data.partition_pathological(ds, data.PartitionSpec(data.Pathological(k, 0.5), n, seed))
    for p in pools:
        present = set(ds.labels[p.index].tolist())
        assert present == set(data.pathological_classes(p.client_id, k, len(counts)))


def test_round_robin_assignment():
    assert [data.pathological_classes(i, 2, 10) for i in range(6)] == \
        [[0, 1], [2, 3], [4, 5], [6, 7], [8, 9], [0, 1]]


def test_practical_huge_gamma_is_nearly_uniform():
    ds = labelled([1000] * 4)
    shares = []
    for seed in range(100):
        pools = data.partition_practical(ds, data.PartitionSpec(data.Practical(1e6), 5, seed))
        counts = np.array([np.bincount(ds.labels[p.index], minlength=4) for p in pools])
        shares.append(counts / counts.sum(axis=0))
    mean = np.mean(shares, axis=0)
    np.testing.assert_allclose(mean, 0.2, atol=0.05 * 0.2)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(1e-6, 1.0), min_size=1, max_size=8), st.integers(0, 1000))
def test_largest_remainder_conserves_total(props, total):
    c = data.largest_remainder(np.array(props), total)
    assert c.sum() == total and np.all(c >= 0)
    exact = np.array(props) / np.sum(props) * total
    assert np.all(np.abs(c - exact) < 1.0 + 1e-9)


@pytest.mark.parametrize("n,test", [(100, 20), (5, 1), (4, 1), (2, 1), (1, 0), (9, 1), (10, 2)])
def test_held_out_count_rule(n, test):
    assert data.held_out_count(n) == test


def test_split_is_stratified_disjoint_and_covering():
    ds = labelled([100, 37, 5])
    pool = data.ClientPool(0, np.arange(len(ds)))
    shard = data.split_train_test(ds, pool, seed=3)
    assert shard.train.class_counts().tolist() == [80, 30, 4]
    assert shard.test.class_counts().tolist() == [20, 7, 1]
    both = np.concatenate([shard.train_index, shard.test_index])
    assert sorted(both.tolist()) == list(range(len(ds)))
    assert shard.n_k == 114
    with pytest.raises(ValueError):
        data.split_train_test(ds, data.ClientPool(1, np.array([], dtype=np.int64)))


def test_impossible_split_raises_partition_error():
    ds = labelled([1, 1])
    spec = data.PartitionSpec(data.Pathological(2, 0.5), 3, 0)
    with pytest.raises(data.PartitionError):
        data.partition(ds, spec)


def test_spec_validation():
    ds = labelled([10, 10])
    with pytest.raises(ValueError):
        data.partition(ds, data.PartitionSpec(data.Pathological(3, 0.5), 2))
    with pytest.raises(ValueError):
        data.partition(ds, data.PartitionSpec(data.Practical(0.0), 2))
    with pytest.raises(ValueError):
        data.partition(ds, data.PartitionSpec(data.Practical(1.0), 0))


def test_synthetic_generator_shape_determinism_and_structure():
    a = data.gen_synthetic(3, (2, 16, 16), 50, 8.0, seed=1)
    b = data.gen_synthetic(3, (2, 16, 16), 50, 8.0, seed=1)
    np.testing.assert_array_equal(a.images, b.images)
    assert a.images.shape == (150, 2, 16, 16) and a.class_counts().tolist() == [50, 50, 50]
    # class means are constant on 4x4 blocks of the image
    big = data.gen_synthetic(2, (1, 16, 16), 20_000, 8.0, seed=2)
    mean0 = big.images[big.labels == 0].mean(axis=0)[0]
    block = mean0[:4, :4]
    assert np.ptp(block) < 0.1 and np.ptp(mean0) > 0.5
    means = [big.images[big.labels == c].mean(axis=0).ravel() for c in range(2)]
    assert np.linalg.norm(means[0] - means[1]) == pytest.approx(8.0, rel=0.05)


def test_synthetic_pixelwise_means():
    ds = data.gen_synthetic(2, (1, 16, 16), 10, 4.0, seed=0, mean_grid=0)
    assert ds.images.shape == (20, 1, 16, 16)
    with pytest.raises(ValueError):
        data.gen_synthetic(2, (1, 16, 16), 10, 4.0, mean_grid=-1)


def test_cifar_binary_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    labels = rng.integers(0, 10, 7).astype(np.uint8)
    pixels = rng.integers(0, 256, (7, 3072)).astype(np.uint8)
    path = tmp_path / "data_batch_1.bin"
    np.concatenate([labels[:, None], pixels], axis=1).tofile(path)
    ds = data.load_cifar10_binary([path, path])
    assert len(ds) == 14 and ds.dims == (3, 32, 32)
    np.testing.assert_array_equal(ds.labels[:7], labels)
    # planar layout: first 1024 bytes are the red channel, row-major
    np.testing.assert_array_equal(ds.images[0, 0].ravel() * 255, pixels[0, :1024])
    np.testing.assert_array_equal(ds.images[3, 2, 31, 31] * 255, pixels[3, 3071])


def test_cifar_loader_rejects_malformed_files(tmp_path):
    short = tmp_path / "short.bin"
    short.write_bytes(b"\x00" * 3000)
    with pytest.raises(ValueError):
        data.load_cifar10_binary([short])
    bad_label = tmp_path / "label.bin"
    bad_label.write_bytes(b"\x0c" + b"\x00" * 3072)
    with pytest.raises(ValueError):
        data.load_cifar10_binary([bad_label])
    with pytest.raises(ValueError):
        data.load_cifar10_binary([])


def test_make_shards_train_and_test_distributions_agree():
    ds = data.gen_synthetic(4, (1, 16, 16), 200, 8.0, seed=0)
    for shard in data.make_shards(ds, data.PartitionSpec(data.Practical(0.5), 5, 0)):
        tr, te = shard.train.class_counts(), shard.test.class_counts()
        total = tr + te
        assert all(te[c] == data.held_out_count(total[c]) for c in range(4))


def test_dataset_validation():
    with pytest.raises(ValueError):
        data.Dataset(np.zeros((2, 1)), np.array([0]), 2)
    with pytest.raises(ValueError):
        data.Dataset(np.zeros((1, 1)), np.array([3]), 2)
