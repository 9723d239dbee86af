"""Accuracy, cost accounting, gate-weight logs and representation dumps.

File formats written here:

``metrics.csv``
    header ``round,mean_acc,min_acc,max_acc,mean_loss,params_tx_cum,flops_cum,delta_sq_mean``;
    one row per round. Floats use Python's shortest round-trip repr.
``per_client.csv``
    ``round,client_id,acc`` for every client every round.
``gate_weights.csv``
    ``round,client_id,sample_idx,label,alpha_local``; ``sample_idx`` indexes
    the client's test set.
``representations.bin``
    little-endian float32 rows ``client_id, sample_idx, label, r_0 .. r_{d-1}``
    with no header; ``representations.txt`` next to it gives rows and columns.
"""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy import stats

from . import models, nn

EVAL_BATCH = 256


@dataclass
class RoundMetrics:
    round: int
    accuracies: list[float]  # indexed by client id
    mean_acc: float
    mean_loss: float
    params_tx: int
    params_tx_cum: int
    flops: int
    flops_cum: int
    delta_sq: dict[int, float] = field(default_factory=dict)

    @property
    def min_acc(self) -> float:
        return min(self.accuracies)

    @property
    def max_acc(self) -> float:
        return max(self.accuracies)

    @property
    def delta_sq_mean(self) -> float:
        return float(np.mean(list(self.delta_sq.values()))) if self.delta_sq else 0.0

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["delta_sq"] = {str(k): v for k, v in self.delta_sq.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RoundMetrics":
        d = dict(d)
        d["delta_sq"] = {int(k): v for k, v in d["delta_sq"].items()}
        return cls(**d)


@dataclass
class GateRow:
    round: int
    client_id: int
    sample_idx: int
    label: int
    alpha_local: float


def predict_batched(predict, images: np.ndarray) -> np.ndarray:
    return np.concatenate([predict(images[i:i + EVAL_BATCH]) for i in range(0, len(images), EVAL_BATCH)])


def accuracy(probs: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        raise ValueError("accuracy of an empty set")
    return 100.0 * float(np.mean(probs.argmax(axis=1) == labels))


def evaluate_client(client) -> float:
    """Test accuracy (%) of a client's resident model in eval mode."""
    test = client.shard.test
    if len(test) == 0:
        raise ValueError(f"client {client.client_id}: empty test set")
    return accuracy(predict_batched(client.predict, test.images), test.labels)


def mean_accuracy(accs: Sequence[float], weights: Sequence[int] | None = None) -> float:
    """Unweighted mean over clients unless per-client weights (test sizes) are given."""
    if weights is None:
        return float(np.mean(accs))
    w = np.asarray(weights, dtype=np.float64)
    return float(np.dot(w / w.sum(), accs))


def rounds_to_target(history: Iterable, target_acc: float) -> int | None:
    """First 1-indexed round whose mean accuracy reaches ``target_acc``."""
    for i, h in enumerate(history, start=1):
        acc = h.mean_acc if isinstance(h, RoundMetrics) else h
        if acc >= target_acc:
            return i
    return None


def comm_cost(rounds: int, per_round_params: int) -> int:
    return int(rounds) * int(per_round_params)


def comp_cost(rounds: int, per_round_flops: int) -> int:
    return int(rounds) * int(per_round_flops)


def param_variation(theta_global: dict[str, np.ndarray], theta_k: dict[str, np.ndarray]) -> float:
    """Squared L2 distance between two parameter snapshots."""
    if theta_global.keys() != theta_k.keys():
        raise ValueError("snapshots have different tensors")
    total = 0.0
    for name, a in theta_global.items():
        b = theta_k[name]
        if a.shape != b.shape:
            raise nn.ShapeError(f"{name}: {a.shape} vs {b.shape}")
        total += float(np.sum((a - b) ** 2))
    return total


def _moe_eval(client, images: np.ndarray, alpha=None) -> models.MoeOutput:
    return models.moe_forward(client.moe, images, "eval", alpha=alpha)


def log_gate_weights(client, dataset, round_: int) -> list[GateRow]:
    rows = []
    for start in range(0, len(dataset), EVAL_BATCH):
        alpha = _moe_eval(client, dataset.images[start:start + EVAL_BATCH]).alpha
        for j, a in enumerate(alpha[:, 1]):
            i = start + j
            rows.append(GateRow(round_, client.client_id, i, int(dataset.labels[i]), float(a)))
    return rows


def export_representations(client, dataset, alpha=None) -> tuple[np.ndarray, np.ndarray]:
    """Mixed representations of ``dataset`` as ``(keys, reps)``; keys are (client, sample, label).

    ``alpha`` overrides the gate, as in :func:`models.moe_forward`.
    """
    reps = [_moe_eval(client, dataset.images[s:s + EVAL_BATCH], alpha).r_mixed
            for s in range(0, len(dataset), EVAL_BATCH)]
    n = len(dataset)
    keys = np.stack([np.full(n, client.client_id), np.arange(n), dataset.labels], axis=1)
    return keys, np.concatenate(reps) if reps else np.zeros((0, models.REPR_DIM))


def gate_histograms_by_client(rows: Sequence[GateRow], round_: int | None = None) -> dict[int, np.ndarray]:
    out: dict[int, list[float]] = {}
    for r in rows:
        if round_ is None or r.round == round_:
            out.setdefault(r.client_id, []).append(r.alpha_local)
    return {k: np.asarray(v) for k, v in sorted(out.items())}


def max_pairwise_ks(samples: dict[int, np.ndarray]) -> float:
    """Largest two-sample Kolmogorov-Smirnov statistic over client pairs."""
    best = 0.0
    for a, b in itertools.combinations(sorted(samples), 2):
        best = max(best, float(stats.ks_2samp(samples[a], samples[b]).statistic))
    return best


# -- writers ---------------------------------------------------------------

METRICS_COLUMNS = ["round", "mean_acc", "min_acc", "max_acc", "mean_loss",
                   "params_tx_cum", "flops_cum", "delta_sq_mean"]


def _fmt(x) -> str:
    return str(x) if isinstance(x, (int, np.integer)) else repr(float(x))


def write_metrics_csv(path, history: Sequence[RoundMetrics]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRICS_COLUMNS)
        for h in history:
            w.writerow([_fmt(getattr(h, c)) for c in METRICS_COLUMNS])


def write_per_client_csv(path, history: Sequence[RoundMetrics]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["round", "client_id", "acc"])
        for h in history:
            for cid, acc in enumerate(h.accuracies):
                w.writerow([h.round, cid, _fmt(acc)])


def write_gate_csv(path, rows: Sequence[GateRow]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["round", "client_id", "sample_idx", "label", "alpha_local"])
        for r in rows:
            w.writerow([r.round, r.client_id, r.sample_idx, r.label, _fmt(r.alpha_local)])


def write_representations(path, keys: np.ndarray, reps: np.ndarray) -> None:
    path = Path(path)
    table = np.concatenate([keys.astype(np.float64), reps], axis=1) if len(keys) else np.zeros((0, 3 + reps.shape[1]))
    path.write_bytes(table.astype("<f4").tobytes())
    dim = reps.shape[1]
    path.with_suffix(".txt").write_text(
        f"rows {table.shape[0]}\n"
        f"columns {table.shape[1]}\n"
        "dtype float32 little-endian, row-major, no header\n"
        "column 0 client_id\ncolumn 1 sample_idx (index into the client's test set)\ncolumn 2 label\n"
        f"columns 3..{dim + 2} mixed representation ({dim} values)\n"
    )


def read_representations(path) -> tuple[np.ndarray, np.ndarray]:
    path = Path(path)
    meta = dict(line.split(" ", 1) for line in path.with_suffix(".txt").read_text().splitlines()[:2])
    table = np.frombuffer(path.read_bytes(), dtype="<f4").reshape(int(meta["rows"]), int(meta["columns"]))
    return table[:, :3].astype(np.int64), table[:, 3:]


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        out.append({k: (int(v) if k in ("round", "params_tx_cum", "flops_cum") else float(v))
                    for k, v in r.items()})
    return out


def read_gate_csv(path) -> list[GateRow]:
    with open(path, newline="") as fh:
        return [GateRow(int(r["round"]), int(r["client_id"]), int(r["sample_idx"]), int(r["label"]),
                        float(r["alpha_local"])) for r in csv.DictReader(fh)]
