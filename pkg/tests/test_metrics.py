from types import SimpleNamespace

import numpy as np
import pytest

from pfedmoe import data, metrics, models, nn

from helpers import toy_federation


def fake_client(predict, images, labels, cid=0):
    test = data.Dataset(images, labels, int(max(labels)) + 1 if len(labels) else 2)
    return SimpleNamespace(client_id=cid, shard=SimpleNamespace(test=test), predict=predict)


def one_hot(labels, k):
    return np.eye(k)[labels]


def test_accuracy_perfect_and_constant_predictors():
    labels = np.array([0, 1, 1, 0, 1, 0])
    imgs = np.zeros((6, 1))
    assert metrics.evaluate_client(fake_client(lambda x: one_hot(labels[:len(x)], 2), imgs, labels)) == 100.0
    const = fake_client(lambda x: np.tile([0.9, 0.1], (len(x), 1)), imgs, labels)
    assert metrics.evaluate_client(const) == 50.0


def test_accuracy_matches_hand_scored_tiny_model():
    w = np.array([[1.0, -1.0], [-1.0, 1.0], [0.5, 0.5]])
    dense = nn.Dense(2, 3)
    dense.params["weight"][:] = w
    net = nn.Network([dense, nn.Softmax()], (2,))
    x = np.array([[2.0, 0.0], [0.0, 2.0], [1.0, 1.0], [3.0, 1.0], [-1.0, -2.0]])
    labels = np.array([0, 1, 2, 1, 1])
    scores = x @ w.T
    predicted = [int(np.argmax(s)) for s in scores]
    expected = 100.0 * np.mean(np.array(predicted) == labels)
    assert predicted[:3] == [0, 1, 2]
    assert metrics.evaluate_client(fake_client(net, x, labels)) == expected


def test_empty_test_set_raises():
    with pytest.raises(ValueError):
        metrics.evaluate_client(fake_client(lambda x: x, np.zeros((0, 2)), np.array([], dtype=int)))


def test_evaluation_is_pure():
    federation = toy_federation(rounds=1)
    federation.run()
    client = federation.clients[1]
    before = client.private_state(), client.moe.global_expert.state()
    a = metrics.evaluate_client(client)
    b = metrics.evaluate_client(client)
    assert a == b
    after = client.private_state(), client.moe.global_expert.state()
    for x, y in zip(before, after):
        assert all(x[k].tobytes() == y[k].tobytes() for k in x)


@pytest.mark.parametrize("target,expected", [(60, 2), (0, 1), (101, None), (70, 4)])
def test_rounds_to_target(target, expected):
    assert metrics.rounds_to_target([40, 60, 55, 70], target) == expected


def test_cost_arithmetic():
    assert metrics.comm_cost(20, 2 * 670_058) == 26_802_320
    assert metrics.comm_cost(0, 123) == 0 and metrics.comp_cost(0, 5) == 0
    assert metrics.comp_cost(3, 7) == 21
    extractor = models.param_count(models.build_extractor(5, (3, 32, 32)))
    assert extractor < models.param_count(models.build_cnn(1))


def test_param_variation():
    assert metrics.param_variation({"a": np.array([1.0, 2.0])}, {"a": np.zeros(2)}) == 5.0
    snap = {"a": np.ones((2, 2)), "b": np.arange(3.0)}
    assert metrics.param_variation(snap, snap) == 0.0
    with pytest.raises(nn.ShapeError):
        metrics.param_variation({"a": np.ones(2)}, {"a": np.ones(3)})
    with pytest.raises(ValueError):
        metrics.param_variation({"a": np.ones(2)}, {"b": np.ones(2)})


def test_weighted_and_unweighted_means():
    assert metrics.mean_accuracy([100.0, 50.0]) == 75.0
    assert metrics.mean_accuracy([100.0, 50.0], [3, 1]) == 87.5


# -- gate and representation logs ------------------------------------------

@pytest.fixture(scope="module")
def trained():
    federation = toy_federation(rounds=2)
    federation.run()
    return federation


def test_gate_rows_cover_test_sets_and_lie_in_open_interval(trained):
    rows = trained.gate_rows
    assert len(rows) == sum(len(c.shard.test) for c in trained.clients)
    assert all(0.0 < r.alpha_local < 1.0 for r in rows)
    assert {r.round for r in rows} == {2}
    first = [r for r in rows if r.client_id == 0]
    assert [r.label for r in first] == trained.clients[0].shard.test.labels.tolist()


def test_symmetric_gate_gives_one_half(trained):
    client = trained.clients[0]
    saved = client.moe.gate.state()
    client.moe.gate.layers[5].params["weight"][:] = 0.0
    for v in client.moe.gate.layers[6].params.values():
        v[:] = 0.0
    try:
        rows = metrics.log_gate_weights(client, client.shard.test, 9)
        assert all(r.alpha_local == 0.5 for r in rows)
    finally:
        client.moe.gate.load_state(saved)


def test_representation_export(trained):
    client = trained.clients[1]
    test = client.shard.test
    keys, reps = metrics.export_representations(client, test)
    assert reps.shape == (len(test), models.REPR_DIM)
    assert keys[:, 0].tolist() == [1] * len(test) and keys[:, 2].tolist() == test.labels.tolist()
    dup = test.subset([0, 0])
    _, twice = metrics.export_representations(client, dup)
    np.testing.assert_array_equal(twice[0], twice[1])
    _, glob = metrics.export_representations(client, test, alpha=(1.0, 0.0))
    np.testing.assert_array_equal(glob, client.moe.global_expert(test.images))


def test_ks_statistic():
    a = np.linspace(0, 1, 50)
    assert metrics.max_pairwise_ks({0: a, 1: a.copy()}) == 0.0
    assert metrics.max_pairwise_ks({0: a, 1: a + 2.0, 2: a}) == 1.0


# -- files -------------------------------------------------------------------

def test_metrics_csv_round_trip_and_mean_convention(trained, tmp_path):
    metrics.write_metrics_csv(tmp_path / "m.csv", trained.history)
    metrics.write_per_client_csv(tmp_path / "p.csv", trained.history)
    rows = metrics.read_metrics_csv(tmp_path / "m.csv")
    assert list(rows[0]) == metrics.METRICS_COLUMNS
    for row, h in zip(rows, trained.history):
        assert row["mean_acc"] == h.mean_acc and row["flops_cum"] == h.flops_cum
        assert row["delta_sq_mean"] == h.delta_sq_mean
    import csv
    with open(tmp_path / "p.csv") as fh:
        per = list(csv.DictReader(fh))
    for h in trained.history:
        accs = [float(r["acc"]) for r in per if int(r["round"]) == h.round]
        assert abs(np.mean(accs) - h.mean_acc) < 1e-12


def test_cumulative_costs_are_monotone(trained):
    h = trained.history
    assert all(b.params_tx_cum >= a.params_tx_cum and b.flops_cum >= a.flops_cum for a, b in zip(h, h[1:]))
    assert all(np.isfinite(x.delta_sq_mean) and x.delta_sq_mean >= 0 for x in h)


def test_gate_csv_round_trip(trained, tmp_path):
    metrics.write_gate_csv(tmp_path / "g.csv", trained.gate_rows)
    assert metrics.read_gate_csv(tmp_path / "g.csv") == trained.gate_rows


def test_representation_binary_layout(tmp_path):
    keys = np.array([[3, 0, 1], [3, 1, 0]])
    reps = np.arange(2 * 500, dtype=np.float64).reshape(2, 500) / 7
    path = tmp_path / "representations.bin"
    metrics.write_representations(path, keys, reps)
    raw = path.read_bytes()
    assert len(raw) == 2 * 503 * 4
    first = np.frombuffer(raw[:503 * 4], dtype="<f4")
    assert first[:3].tolist() == [3.0, 0.0, 1.0]
    assert first[3] == np.float32(0.0) and first[4] == np.float32(1 / 7)
    sidecar = path.with_suffix(".txt").read_text()
    assert "rows 2" in sidecar and "columns 503" in sidecar
    k, r = metrics.read_representations(path)
    np.testing.assert_array_equal(k, keys)
    np.testing.assert_array_equal(r, reps.astype(np.float32))


def test_round_metrics_dict_round_trip(trained):
    h = trained.history[-1]
    back = metrics.RoundMetrics.from_dict(h.to_dict())
    assert back == h and back.min_acc <= back.mean_acc <= back.max_acc
