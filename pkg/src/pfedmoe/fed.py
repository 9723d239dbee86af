"""Federation loop for pFedMoE and the Standalone / FedAvg references.

Each round the server samples clients, broadcasts the shared small extractor,
every sampled client trains its MoE (shared extractor, private extractor,
gate and header) end to end, and the uploaded extractors are averaged with
weights proportional to local training-set size. Private parts never leave
the client objects.

Random streams are derived from the run seed and fixed tags, so a client's
initialisation and batch order depend only on (seed, client id, round):

    [seed, 0]              global extractor init
    [seed, 1, cid]         client's heterogeneous model init
    [seed, 2, cid]         client's gate init
    [seed, 3, cid, t]      client's batch order in round t
    [seed, 4, t]           client sampling in round t
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from . import metrics, models, nn
from .data import ClientShard
from .metrics import GateRow, RoundMetrics

log = logging.getLogger(__name__)

ALGORITHMS = ("pfedmoe", "standalone", "fedavg")
ASSIGNMENTS = ("mod5", "cnn1", "cnn2", "cnn3", "cnn4", "cnn5")


class ConfigError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class TrainingError(RuntimeError):
    pass


@dataclass
class FederationConfig:
    num_clients: int = 10
    participation: float = 1.0
    rounds: int = 10
    local_epochs: int = 1
    batch_size: int = 64
    lr_theta: float = 0.01
    lr_omega: float | None = None  # defaults to lr_theta
    lr_phi: float = 0.01
    algorithm: str = "pfedmoe"
    assignment: str = "mod5"
    global_model: str = "cnn5"
    gate_hidden: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.lr_omega is None:
            self.lr_omega = self.lr_theta
        self.validate()

    def validate(self) -> None:
        if self.num_clients < 1:
            raise ConfigError("num_clients", "must be >= 1")
        if not 0 < self.participation <= 1:
            raise ConfigError("participation", "0 < C <= 1")
        if self.num_sampled < 1:
            raise ConfigError("participation", "round(C*N) must be >= 1")
        for name in ("rounds", "local_epochs", "batch_size"):
            if getattr(self, name) < 1:
                raise ConfigError(name, "must be >= 1")
        for name in ("lr_theta", "lr_omega", "lr_phi"):
            if not getattr(self, name) >= 0:
                raise ConfigError(name, "must be >= 0")
        if self.algorithm not in ALGORITHMS:
            raise ConfigError("algorithm", f"must be one of {', '.join(ALGORITHMS)}")
        if self.assignment not in ASSIGNMENTS:
            raise ConfigError("assignment", f"must be one of {', '.join(ASSIGNMENTS)}")
        if self.algorithm == "fedavg" and self.assignment == "mod5":
            raise ConfigError("assignment", "fedavg needs one shared model (cnn1..cnn5), not mod5")
        try:
            models.CnnVariant.get(self.global_model)
        except ValueError as e:
            raise ConfigError("global_model", str(e)) from None
        if self.gate_hidden < 2:
            raise ConfigError("gate_hidden", "m must be >= 2")

    @property
    def num_sampled(self) -> int:
        return int(math.floor(self.participation * self.num_clients + 0.5))

    def variant_for(self, client_id: int) -> models.CnnVariant:
        if self.assignment == "mod5":
            return models.variant_for_client(client_id)
        return models.CnnVariant.get(self.assignment)


@dataclass
class ExtractorUpdate:
    client_id: int
    theta_k: dict[str, np.ndarray]
    n_k: int


@dataclass
class TrainStats:
    client_id: int
    mean_loss: float
    batches: int
    samples: int


@dataclass
class ServerState:
    theta: dict[str, np.ndarray]
    round: int = 0


def seeded(*tags) -> np.random.Generator:
    return np.random.default_rng([int(t) for t in tags])


class PFedMoEClient:
    def __init__(self, client_id: int, shard: ClientShard, moe: models.MoeModel, variant: models.CnnVariant):
        self.client_id, self.shard, self.moe, self.variant = client_id, shard, moe, variant

    def predict(self, x: np.ndarray) -> np.ndarray:
        return models.moe_forward(self.moe, x, "eval").y

    def private_state(self) -> dict[str, np.ndarray]:
        out = {}
        for part in ("local", "gate", "header"):
            for k, v in self.moe.parts()[part].state().items():
                out[f"{part}/{k}"] = v
        return out

    def parts(self) -> dict[str, nn.Network]:
        return self.moe.parts()

    def train_flops_per_sample(self) -> int:
        return models.TRAIN_FLOPS_MULTIPLIER * models.moe_flops_forward(self.moe)


class LocalModelClient:
    """A client owning one complete CNN (Standalone and FedAvg)."""

    def __init__(self, client_id: int, shard: ClientShard, model: nn.Network, variant: models.CnnVariant):
        self.client_id, self.shard, self.model, self.variant = client_id, shard, model, variant

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.model(x)

    def private_state(self) -> dict[str, np.ndarray]:
        return {f"model/{k}": v for k, v in self.model.state().items()}

    def parts(self) -> dict[str, nn.Network]:
        return {"model": self.model}

    def train_flops_per_sample(self) -> int:
        return models.TRAIN_FLOPS_MULTIPLIER * models.flops_forward(self.model)


def build_client_model(cfg: FederationConfig, client_id: int, dims, num_classes: int) -> nn.Network:
    return models.build_cnn(cfg.variant_for(client_id), dims, num_classes, seeded(cfg.seed, 1, client_id))


def build_global_extractor(cfg: FederationConfig, dims, num_classes: int) -> nn.Network:
    return models.build_extractor(cfg.global_model, dims, num_classes, seeded(cfg.seed, 0))


def make_pfedmoe_client(cfg, shard: ClientShard, theta0: dict, dims, num_classes) -> PFedMoEClient:
    cid = shard.client_id
    split = models.split_extractor_header(build_client_model(cfg, cid, dims, num_classes))
    global_expert = build_global_extractor(cfg, dims, num_classes)
    global_expert.load_state(theta0)
    gate = models.build_gating(dims, cfg.gate_hidden, seeded(cfg.seed, 2, cid))
    moe = models.MoeModel(global_expert, split.extractor, gate, split.header)
    return PFedMoEClient(cid, shard, moe, cfg.variant_for(cid))


def sample_clients(seed: int, num_clients: int, participation: float, t: int) -> list[int]:
    """Uniform sample without replacement of round(C*N) ids, ascending."""
    k = int(math.floor(participation * num_clients + 0.5))
    if k < 1:
        raise ValueError("round(C*N) must be >= 1")
    if k > num_clients:
        raise ValueError(f"cannot sample {k} of {num_clients} clients")
    if k == num_clients:
        return list(range(num_clients))
    return sorted(int(i) for i in seeded(seed, 4, t).choice(num_clients, size=k, replace=False))


def minibatches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    """One shuffled epoch of index batches.

    A short trailing batch is folded into the one before it, so every batch
    except a lone first one holds between ``batch_size`` and
    ``2*batch_size - 1`` samples. A three-sample step normalised by the gate's
    batch norms is noisy enough to collapse a trained client.
    """
    order = rng.permutation(n)
    out = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(out) > 1 and len(out[-1]) < batch_size:
        tail = out.pop()
        out[-1] = np.concatenate([out[-1], tail])
    return out


def _train_loop(client, cfg: FederationConfig, t: int, step) -> TrainStats:
    train = client.shard.train
    if len(train) == 0:
        raise TrainingError(f"round {t}, client {client.client_id}: empty training shard")
    rng = seeded(cfg.seed, 3, client.client_id, t)
    losses, samples = [], 0
    for epoch in range(cfg.local_epochs):
        for b, idx in enumerate(minibatches(len(train), cfg.batch_size, rng)):
            try:
                loss = step(train.images[idx], train.labels[idx])
            except nn.NonFiniteError as e:
                raise TrainingError(f"round {t}, client {client.client_id}, epoch {epoch}, batch {b}: {e}") from e
            if not np.isfinite(loss):
                raise TrainingError(f"round {t}, client {client.client_id}, epoch {epoch}, batch {b}: "
                                    f"non-finite loss")
            losses.append(loss)
            samples += len(idx)
    return TrainStats(client.client_id, float(np.mean(losses)), len(losses), samples)


def client_update_pfedmoe(client: PFedMoEClient, theta_global: dict, cfg: FederationConfig, t: int,
                          alpha=None) -> tuple[ExtractorUpdate, TrainStats]:
    """Load the broadcast extractor, train the MoE for E epochs, return the updated extractor.

    All four parts are updated after every mini-batch from one backward pass,
    the shared extractor with ``lr_theta``, the private extractor and header
    with ``lr_omega`` and the gate with ``lr_phi``. ``alpha`` forces the expert
    weights (testing hook).
    """
    moe = client.moe
    moe.global_expert.load_state(theta_global)
    opts = [(moe.global_expert, nn.Sgd(cfg.lr_theta)), (moe.local_expert, nn.Sgd(cfg.lr_omega)),
            (moe.header, nn.Sgd(cfg.lr_omega)), (moe.gate, nn.Sgd(cfg.lr_phi))]

    def step(x, y):
        moe.zero_grads()
        out = models.moe_forward(moe, x, "train", alpha=alpha)
        loss, g = nn.cross_entropy(out.y, y)
        models.moe_backward(out.tape, g)
        for net, opt in opts:
            nn.sgd_step(opt, net)
        return loss

    stats = _train_loop(client, cfg, t, step)
    update = ExtractorUpdate(client.client_id, moe.global_expert.state(), client.shard.n_k)
    return update, stats


def _train_full_model(client: LocalModelClient, cfg: FederationConfig, t: int) -> TrainStats:
    net, opt = client.model, nn.Sgd(cfg.lr_omega)

    def step(x, y):
        net.zero_grads()
        out, tape = nn.forward(net, x, "train")
        loss, g = nn.cross_entropy(out, y)
        nn.backward(tape, g)
        nn.sgd_step(opt, net)
        return loss

    return _train_loop(client, cfg, t, step)


def client_update_standalone(client: LocalModelClient, cfg: FederationConfig, t: int) -> TrainStats:
    """Train the private model on local data only; nothing is exchanged."""
    return _train_full_model(client, cfg, t)


def client_update_fedavg(client: LocalModelClient, global_state: dict, cfg: FederationConfig,
                         t: int) -> tuple[ExtractorUpdate, TrainStats]:
    client.model.load_state(global_state)
    stats = _train_full_model(client, cfg, t)
    return ExtractorUpdate(client.client_id, client.model.state(), client.shard.n_k), stats


def aggregate_extractors(updates: list[ExtractorUpdate]) -> dict[str, np.ndarray]:
    """Weighted average of uploaded snapshots with weights n_k / sum(n_k).

    Updates are consumed in ascending client id. The sum is accumulated as
    offsets from the first snapshot, so identical uploads reproduce it exactly.
    """
    if not updates:
        raise ValueError("no updates to aggregate")
    ups = sorted(updates, key=lambda u: u.client_id)
    keys = ups[0].theta_k.keys()
    for u in ups[1:]:
        if u.theta_k.keys() != keys:
            raise ValueError(f"client {u.client_id}: snapshot tensors differ")
        for k in keys:
            if u.theta_k[k].shape != ups[0].theta_k[k].shape:
                raise nn.ShapeError(f"client {u.client_id}: {k} has shape {u.theta_k[k].shape}")
    n = float(sum(u.n_k for u in ups))
    if n <= 0:
        raise ValueError("total sample count must be positive")
    base = ups[0].theta_k
    out = {}
    for k in keys:
        acc = np.zeros_like(base[k])
        for u in ups[1:]:
            acc += (u.n_k / n) * (u.theta_k[k] - base[k])
        out[k] = base[k] + acc
    return out


class Federation:
    """Server state, client states and the round history of one experiment."""

    def __init__(self, cfg: FederationConfig, shards: list[ClientShard], dims, num_classes: int,
                 gate_log_every: int = 0, threads: int = 1, weighted_mean: bool = False):
        if len(shards) != cfg.num_clients:
            raise ConfigError("num_clients", f"{cfg.num_clients} clients but {len(shards)} shards")
        for s in shards:
            if len(s.test) == 0:
                raise TrainingError(f"client {s.client_id}: empty test set")
        self.cfg, self.dims, self.num_classes = cfg, tuple(dims), num_classes
        self.gate_log_every, self.threads, self.weighted_mean = gate_log_every, threads, weighted_mean
        self.history: list[RoundMetrics] = []
        self.gate_rows: list[GateRow] = []
        if cfg.algorithm == "pfedmoe":
            theta0 = build_global_extractor(cfg, dims, num_classes).state()
            self.server = ServerState(theta0)
            self.clients = [make_pfedmoe_client(cfg, s, theta0, dims, num_classes) for s in shards]
            self.per_client_tx = 2 * models.param_count(self.clients[0].moe.global_expert)
        else:
            self.clients = [LocalModelClient(s.client_id, s, build_client_model(cfg, s.client_id, dims, num_classes),
                                             cfg.variant_for(s.client_id)) for s in shards]
            if cfg.algorithm == "fedavg":
                self.server_model = models.build_cnn(cfg.assignment, dims, num_classes, seeded(cfg.seed, 0))
                self.server = ServerState(self.server_model.state())
                self.per_client_tx = 2 * models.param_count(self.server_model)
            else:
                self.server = ServerState({})
                self.per_client_tx = 0

    @property
    def round(self) -> int:
        return self.server.round

    def _map(self, fn, items):
        if self.threads > 1 and len(items) > 1:
            with ThreadPoolExecutor(max_workers=self.threads) as pool:
                return list(pool.map(fn, items))
        return [fn(i) for i in items]

    def run_round(self) -> RoundMetrics:
        cfg = self.cfg
        t = self.server.round + 1
        if t > cfg.rounds:
            raise RuntimeError(f"all {cfg.rounds} rounds already run")
        sampled = sample_clients(cfg.seed, cfg.num_clients, cfg.participation, t)
        chosen = [self.clients[i] for i in sampled]
        delta_sq: dict[int, float] = {}
        if cfg.algorithm == "pfedmoe":
            theta = self.server.theta
            results = self._map(lambda c: client_update_pfedmoe(c, theta, cfg, t), chosen)
            updates, stats = [r[0] for r in results], [r[1] for r in results]
            self.server.theta = aggregate_extractors(updates)
            delta_sq = {u.client_id: metrics.param_variation(self.server.theta, u.theta_k) for u in updates}
        elif cfg.algorithm == "fedavg":
            theta = self.server.theta
            results = self._map(lambda c: client_update_fedavg(c, theta, cfg, t), chosen)
            updates, stats = [r[0] for r in results], [r[1] for r in results]
            self.server.theta = aggregate_extractors(updates)
            self.server_model.load_state(self.server.theta)
            delta_sq = {u.client_id: metrics.param_variation(self.server.theta, u.theta_k) for u in updates}
        else:
            stats = self._map(lambda c: client_update_standalone(c, cfg, t), chosen)
        self.server.round = t

        accs = self.evaluate()
        weights = [len(c.shard.test) for c in self.clients] if self.weighted_mean else None
        params_tx = len(sampled) * self.per_client_tx
        flops = int(round(np.mean([c.train_flops_per_sample() * s.samples for c, s in zip(chosen, stats)])))
        prev = self.history[-1] if self.history else None
        rm = RoundMetrics(
            round=t,
            accuracies=accs,
            mean_acc=metrics.mean_accuracy(accs, weights),
            mean_loss=float(np.mean([s.mean_loss for s in stats])),
            params_tx=params_tx,
            params_tx_cum=(prev.params_tx_cum if prev else 0) + params_tx,
            flops=flops,
            flops_cum=(prev.flops_cum if prev else 0) + flops,
            delta_sq=delta_sq,
        )
        self.history.append(rm)
        if cfg.algorithm == "pfedmoe" and self._log_gates_at(t):
            for c in self.clients:
                self.gate_rows.extend(metrics.log_gate_weights(c, c.shard.test, t))
        return rm

    def _log_gates_at(self, t: int) -> bool:
        return t == self.cfg.rounds or (self.gate_log_every > 0 and t % self.gate_log_every == 0)

    def evaluate(self) -> list[float]:
        if self.cfg.algorithm == "fedavg":
            return [metrics.accuracy(metrics.predict_batched(self.server_model, c.shard.test.images),
                                     c.shard.test.labels) for c in self.clients]
        return [metrics.evaluate_client(c) for c in self.clients]

    def run(self, callback=None) -> list[RoundMetrics]:
        while self.server.round < self.cfg.rounds:
            rm = self.run_round()
            if callback:
                callback(self, rm)
        return self.history

    # -- checkpoints -------------------------------------------------------

    def checkpoint(self, config_hash: str) -> tuple[dict, dict]:
        tensors = {f"server/{k}": v for k, v in self.server.theta.items()}
        for c in self.clients:
            for part, net in c.parts().items():
                for k, v in net.state().items():
                    tensors[f"client/{c.client_id}/{part}/{k}"] = v
        meta = {
            "round": self.server.round,
            "config_sha256": config_hash,
            "history": [h.to_dict() for h in self.history],
            "gate_rows": [asdict(r) for r in self.gate_rows],
        }
        return tensors, meta

    def restore(self, tensors: dict, meta: dict, config_hash: str) -> None:
        if meta.get("config_sha256") != config_hash:
            raise ValueError("checkpoint was written by a different configuration")
        self.server.theta = {k[len("server/"):]: v.copy() for k, v in tensors.items() if k.startswith("server/")}
        self.server.round = int(meta["round"])
        if self.cfg.algorithm == "fedavg":
            self.server_model.load_state(self.server.theta)
        for c in self.clients:
            for part, net in c.parts().items():
                prefix = f"client/{c.client_id}/{part}/"
                net.load_state({k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)})
        self.history = [RoundMetrics.from_dict(h) for h in meta["history"]]
        self.gate_rows = [GateRow(**r) for r in meta["gate_rows"]]
