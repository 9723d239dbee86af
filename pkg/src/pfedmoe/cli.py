"""Command-line experiment runner.

::

    pfedmoe run --config exp.toml --out runs/exp [--threads N] [--resume CKPT]
    pfedmoe summarize runs/exp

A run writes its bundle into ``--out``:

    config.toml            resolved configuration (enough to reproduce the run)
    metrics.csv            one row per round
    per_client.csv         per-client accuracy per round
    gate_weights.csv       per-sample local-expert weight (pfedmoe only)
    representations.bin    mixed test representations after the last round
    representations.txt    layout of the .bin file
    summary.json           accuracy / communication / computation summary
    checkpoints/round_NNNN.pfms   when output.checkpoint_every > 0

Failures print one line ``error <CODE>: <message>`` on stderr and exit
non-zero: 2 config, 3 data, 4 numeric, 5 checkpoint, 1 anything else.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import data, fed, metrics, snapshot
from .config import ConfigSyntaxError, ExperimentConfig, echo, load_config, parse_config

log = logging.getLogger("pfedmoe")

EXIT_CODES = {"E_INTERNAL": 1, "E_CONFIG": 2, "E_DATA": 3, "E_NUMERIC": 4, "E_CHECKPOINT": 5}
NOT_REACHED = "not reached"


class CliError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(message)
        self.code = code


# -- wiring ------------------------------------------------------------------

def build_dataset(cfg: ExperimentConfig) -> data.Dataset:
    d = cfg.dataset
    if d.kind == "cifar10":
        ds = data.load_cifar10_binary(d.paths)
        if d.max_samples and d.max_samples < len(ds):
            ds = ds.subset(np.arange(d.max_samples))
        return ds
    return data.gen_synthetic(d.num_classes, d.dims, d.samples_per_class, d.class_separation,
                              seed=cfg.seed, noise=d.noise, mean_grid=d.mean_grid)


def build_federation(cfg: ExperimentConfig, threads: int = 1) -> fed.Federation:
    try:
        ds = build_dataset(cfg)
        shards = data.make_shards(ds, cfg.partition_spec())
    except (OSError, ValueError, data.PartitionError) as e:
        raise CliError("E_DATA", str(e)) from e
    if any(len(s.test) == 0 for s in shards):
        empty = [s.client_id for s in shards if len(s.test) == 0]
        raise CliError("E_DATA", f"clients {empty} have no test samples; use more data or fewer clients")
    return fed.Federation(cfg.federation_config(), shards, ds.dims, ds.num_classes,
                          gate_log_every=cfg.output.gate_log_every, threads=threads,
                          weighted_mean=cfg.output.mean == "weighted")


def config_hash(cfg: ExperimentConfig) -> str:
    import hashlib
    return hashlib.sha256(echo(cfg).encode()).hexdigest()


def checkpoint_path(out: Path, t: int) -> Path:
    return out / "checkpoints" / f"round_{t:04d}.pfms"


# -- summary -----------------------------------------------------------------

def summarize_rows(rows: list[dict], per_client: list[dict], targets: list[float]) -> dict:
    """Summary document from metrics.csv / per_client.csv rows."""
    if not rows:
        raise ValueError("no rounds recorded")
    last = rows[-1]
    final = sorted((r for r in per_client if r["round"] == last["round"]), key=lambda r: r["client_id"])
    reach = {}
    for target in targets:
        r = metrics.rounds_to_target([row["mean_acc"] for row in rows], target)
        if r is None:
            reach[repr(float(target))] = {"round": NOT_REACHED, "params_tx": NOT_REACHED, "flops": NOT_REACHED}
        else:
            reach[repr(float(target))] = {"round": r, "params_tx": rows[r - 1]["params_tx_cum"],
                                          "flops": rows[r - 1]["flops_cum"]}
    deltas = [row["delta_sq_mean"] for row in rows]
    return {
        "rounds": last["round"],
        "final_mean_acc": last["mean_acc"],
        "final_accuracies": [r["acc"] for r in final],
        "best_mean_acc": max(row["mean_acc"] for row in rows),
        "targets": reach,
        "total_params_tx": last["params_tx_cum"],
        "total_flops": last["flops_cum"],
        "delta_sq": {"first": deltas[0], "last": deltas[-1], "min": min(deltas), "max": max(deltas)},
    }


def read_per_client_csv(path) -> list[dict]:
    import csv
    with open(path, newline="") as fh:
        return [{"round": int(r["round"]), "client_id": int(r["client_id"]), "acc": float(r["acc"])}
                for r in csv.DictReader(fh)]


def summarize(bundle) -> dict:
    """Recompute the summary of a finished run from its CSV files."""
    bundle = Path(bundle)
    needed = ["config.toml", "metrics.csv", "per_client.csv"]
    missing = [n for n in needed if not (bundle / n).is_file()]
    if missing:
        raise FileNotFoundError(f"{bundle}: missing {', '.join(missing)}")
    cfg = load_config(bundle / "config.toml")
    return summarize_rows(metrics.read_metrics_csv(bundle / "metrics.csv"),
                          read_per_client_csv(bundle / "per_client.csv"), cfg.output.targets)


# -- run ---------------------------------------------------------------------

def write_bundle(cfg: ExperimentConfig, federation: fed.Federation, out: Path) -> dict:
    out.mkdir(parents=True, exist_ok=True)
    metrics.write_metrics_csv(out / "metrics.csv", federation.history)
    metrics.write_per_client_csv(out / "per_client.csv", federation.history)
    metrics.write_gate_csv(out / "gate_weights.csv", federation.gate_rows)
    if cfg.federation.algorithm == "pfedmoe" and cfg.output.representations:
        keys, reps = [], []
        for c in federation.clients:
            k, r = metrics.export_representations(c, c.shard.test)
            keys.append(k)
            reps.append(r)
        metrics.write_representations(out / "representations.bin", np.concatenate(keys), np.concatenate(reps))
    summary = summarize(out)
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    return summary


def run_experiment(cfg: ExperimentConfig, out, threads: int = 1, resume=None,
                   progress=print) -> fed.Federation:
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.toml").write_text(echo(cfg))
    federation = build_federation(cfg, threads)
    digest = config_hash(cfg)
    if resume is not None:
        try:
            tensors, meta = snapshot.load(resume)
            federation.restore(tensors, meta, digest)
        except (OSError, KeyError, ValueError) as e:
            raise CliError("E_CHECKPOINT", f"{resume}: {e}") from e
        progress(f"resumed from round {federation.round}")
    every = cfg.output.checkpoint_every

    def on_round(f: fed.Federation, rm: metrics.RoundMetrics) -> None:
        progress(f"round {rm.round}/{cfg.federation.rounds} mean_acc={rm.mean_acc:.2f} "
                 f"loss={rm.mean_loss:.4f} params_tx_cum={rm.params_tx_cum}")
        if every and rm.round % every == 0:
            path = checkpoint_path(out, rm.round)
            path.parent.mkdir(exist_ok=True)
            snapshot.save(path, *f.checkpoint(digest))

    try:
        federation.run(on_round)
    except fed.TrainingError as e:
        raise CliError("E_NUMERIC", str(e)) from e
    write_bundle(cfg, federation, out)
    return federation


# -- entry point -------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pfedmoe", description="Federated MoE experiment runner")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run one experiment from a config file")
    r.add_argument("--config", required=True, help="experiment TOML file")
    r.add_argument("--out", required=True, help="output directory")
    r.add_argument("--threads", type=int, default=1, help="parallel client updates (1 = bit-exact)")
    r.add_argument("--resume", default=None, help="checkpoint file to continue from")
    s = sub.add_parser("summarize", help="print the summary of a finished run")
    s.add_argument("bundle", help="output directory of a run")
    return p


def _classify(e: Exception) -> tuple[str, str]:
    if isinstance(e, CliError):
        return e.code, str(e)
    if isinstance(e, (ConfigSyntaxError, fed.ConfigError)):
        return "E_CONFIG", str(e)
    if isinstance(e, fed.TrainingError):
        return "E_NUMERIC", str(e)
    if isinstance(e, snapshot.SnapshotError):
        return "E_CHECKPOINT", str(e)
    if isinstance(e, (OSError, data.PartitionError)):
        return "E_DATA", str(e)
    return "E_INTERNAL", f"{type(e).__name__}: {e}"


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "run":
            if args.threads < 1:
                raise CliError("E_CONFIG", "--threads must be >= 1")
            try:
                text = Path(args.config).read_text(encoding="utf-8")
            except OSError as e:
                raise CliError("E_CONFIG", f"cannot read config: {e}") from e
            cfg = parse_config(text)
            run_experiment(cfg, args.out, args.threads, args.resume, progress=lambda s: print(s, flush=True))
            print(f"done: bundle written to {args.out}")
        else:
            print(json.dumps(summarize(args.bundle), indent=2))
    except Exception as e:  # noqa: BLE001 - every failure maps to an exit code
        code, msg = _classify(e)
        print(f"error {code}: {' '.join(msg.split())}", file=sys.stderr)
        return EXIT_CODES[code]
    return 0


if __name__ == "__main__":
    sys.exit(main())
