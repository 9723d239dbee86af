import csv
import json
import math
import shutil
import time
from pathlib import Path

import pytest
from hypothesis import assume, given, settings, strategies as st

from pfedmoe import cli, fed, models
from pfedmoe.config import ConfigSyntaxError, echo, load_config, parse_config

DATA = Path(__file__).parent / "data"
GOLDEN = DATA / "golden.toml"


def run_cli(args, capsys):
    code = cli.main([str(a) for a in args])
    out, err = capsys.readouterr()
    return code, out, err


# -- configuration -----------------------------------------------------------

def test_minimal_config_gets_defaults():
    cfg = parse_config("seed = 1\n")
    assert cfg.model.gate_hidden == 64
    assert cfg.partition.beta == 0.5
    assert cfg.federation.local_epochs == 1
    assert cfg.federation.lr_omega == cfg.federation.lr_theta
    assert cfg.output.mean == "unweighted"


@settings(max_examples=40, deadline=None)
@given(
    seed=st.integers(0, 2**31),
    clients=st.integers(1, 50),
    c=st.floats(0.01, 1.0),
    lr=st.floats(1e-4, 1.0),
    algo=st.sampled_from(["pfedmoe", "fedavg", "standalone"]),
    part=st.sampled_from(["pathological", "practical"]),
    targets=st.lists(st.floats(0.0, 100.0), max_size=3),
)
def test_echo_round_trips(seed, clients, c, lr, algo, part, targets):
    assume(math.floor(c * clients + 0.5) >= 1)
    text = (f"seed = {seed}\n[federation]\nalgorithm = \"{algo}\"\nnum_clients = {clients}\n"
            f"participation = {c!r}\nlr_theta = {lr!r}\n[partition]\nkind = \"{part}\"\n"
            f"[model]\nassignment = \"{'cnn5' if algo == 'fedavg' else 'mod5'}\"\n"
            f"[output]\ntargets = [{', '.join(repr(t) for t in targets)}]\n")
    cfg = parse_config(text)
    assert parse_config(echo(cfg)) == cfg
    assert echo(parse_config(echo(cfg))) == echo(cfg)


@pytest.mark.parametrize("c", [0, 0.0, -0.5, 1.5])
def test_participation_out_of_range_names_the_field(c):
    with pytest.raises(fed.ConfigError) as e:
        parse_config(f"[federation]\nparticipation = {c}\n")
    assert e.value.field == "federation.participation"
    assert "0 < C <= 1" in str(e.value)


def test_unknown_keys_and_types_are_rejected():
    with pytest.raises(fed.ConfigError, match="federation.rounds_total"):
        parse_config("[federation]\nrounds_total = 3\n")
    with pytest.raises(fed.ConfigError, match="unknown key"):
        parse_config("[extras]\nx = 1\n")
    with pytest.raises(fed.ConfigError, match="expected an integer"):
        parse_config("[federation]\nrounds = 2.5\n")


def test_model_errors_are_attributed_to_model_block():
    with pytest.raises(fed.ConfigError) as e:
        parse_config("[model]\nglobal_model = \"resnet\"\n")
    assert e.value.field.startswith("model.")


def test_syntax_error_reports_line_and_column():
    with pytest.raises(ConfigSyntaxError) as e:
        parse_config("seed = 1\n[federation]\nrounds = = 3\n")
    assert e.value.line == 3 and e.value.column is not None
    assert "line 3" in str(e.value)


def test_image_below_minimum_is_a_config_error():
    with pytest.raises(fed.ConfigError, match="dataset.image_size"):
        parse_config("[dataset]\nimage_size = 14\n")


# -- command line --------------------------------------------------------------

def test_exit_code_for_bad_config(tmp_path, capsys):
    bad = tmp_path / "bad.toml"
    bad.write_text("[federation]\nparticipation = 0\n")
    code, _, err = run_cli(["run", "--config", bad, "--out", tmp_path / "o"], capsys)
    assert code == 2
    assert err.startswith("error E_CONFIG:") and "federation.participation" in err
    assert err.count("\n") == 1


def test_exit_code_for_missing_config_and_syntax(tmp_path, capsys):
    code, _, _ = run_cli(["run", "--config", tmp_path / "nope.toml", "--out", tmp_path / "o"], capsys)
    assert code == 2
    bad = tmp_path / "syn.toml"
    bad.write_text("seed = \n")
    code, _, err = run_cli(["run", "--config", bad, "--out", tmp_path / "o"], capsys)
    assert code == 2 and "line 1" in err


def test_exit_code_for_missing_data(tmp_path, capsys):
    cfg = tmp_path / "c.toml"
    cfg.write_text(f"[dataset]\nkind = \"cifar10\"\npaths = [\"{tmp_path / 'missing.bin'}\"]\n")
    code, _, err = run_cli(["run", "--config", cfg, "--out", tmp_path / "o"], capsys)
    assert code == 3 and err.startswith("error E_DATA:")
    code, _, _ = run_cli(["summarize", tmp_path / "nothing"], capsys)
    assert code == 3


def test_exit_code_for_bad_checkpoint(tmp_path, capsys):
    junk = tmp_path / "junk.pfms"
    junk.write_bytes(b"PFMS\x01")
    code, _, err = run_cli(["run", "--config", GOLDEN, "--out", tmp_path / "o", "--resume", junk], capsys)
    assert code == 5 and err.startswith("error E_CHECKPOINT:")


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_exit_code_for_divergence(tmp_path, capsys):
    cfg = tmp_path / "c.toml"
    cfg.write_text(GOLDEN.read_text().replace("lr_theta = 0.1", "lr_theta = 1e300"))
    code, _, err = run_cli(["run", "--config", cfg, "--out", tmp_path / "o"], capsys)
    assert code == 4 and "round 1, client" in err


@pytest.fixture(scope="module")
def golden_bundle(tmp_path_factory):
    out = tmp_path_factory.mktemp("golden")
    start = time.perf_counter()
    assert cli.main(["run", "--config", str(GOLDEN), "--out", str(out)]) == 0
    return out, time.perf_counter() - start


def test_smoke_run_is_fast_and_complete(golden_bundle):
    out, seconds = golden_bundle
    assert seconds < 60
    for name in ("config.toml", "metrics.csv", "per_client.csv", "gate_weights.csv",
                 "representations.bin", "representations.txt", "summary.json"):
        assert (out / name).is_file(), name
    assert sorted(p.name for p in (out / "checkpoints").iterdir()) == \
        ["round_0001.pfms", "round_0002.pfms", "round_0003.pfms"]
    assert load_config(out / "config.toml") == load_config(GOLDEN)


def test_golden_metrics_are_frozen(golden_bundle):
    def rows(path):
        with open(path) as fh:
            return list(csv.DictReader(fh))
    got, want = rows(golden_bundle[0] / "metrics.csv"), rows(DATA / "golden_metrics.csv")
    assert len(got) == len(want)
    for g, w in zip(got, want):
        for k in w:
            if k in ("round", "params_tx_cum", "flops_cum"):
                assert g[k] == w[k], k
            else:
                assert math.isclose(float(g[k]), float(w[k]), rel_tol=1e-9, abs_tol=1e-9), k


def test_summary_matches_csv_and_cost_arithmetic(golden_bundle, capsys):
    out, _ = golden_bundle
    written = json.loads((out / "summary.json").read_text())
    code, printed, _ = run_cli(["summarize", out], capsys)
    assert code == 0 and json.loads(printed) == written == cli.summarize(out)
    cfg = load_config(GOLDEN)
    theta = models.param_count(models.build_extractor(5, cfg.dataset.dims, cfg.dataset.classes))
    k = math.floor(cfg.federation.participation * cfg.federation.num_clients + 0.5)
    assert written["total_params_tx"] == cfg.federation.rounds * k * 2 * theta
    reached = written["targets"]["50.0"]
    metrics_rows = list(csv.DictReader(open(out / "metrics.csv")))
    r = reached["round"]
    assert reached["params_tx"] == r * k * 2 * theta
    assert reached["flops"] == int(metrics_rows[r - 1]["flops_cum"])
    assert written["targets"]["99.5"] == {"round": cli.NOT_REACHED, "params_tx": cli.NOT_REACHED,
                                          "flops": cli.NOT_REACHED}


def test_resume_reproduces_the_bundle(golden_bundle, tmp_path):
    out, _ = golden_bundle
    resumed = tmp_path / "resumed"
    cfg = load_config(GOLDEN)
    cli.run_experiment(cfg, resumed, resume=out / "checkpoints" / "round_0001.pfms", progress=lambda s: None)
    for name in ("metrics.csv", "per_client.csv", "gate_weights.csv", "representations.bin", "summary.json"):
        assert (resumed / name).read_bytes() == (out / name).read_bytes(), name


def test_resume_with_other_config_is_rejected(golden_bundle, tmp_path):
    out, _ = golden_bundle
    cfg = parse_config(GOLDEN.read_text().replace("seed = 3", "seed = 4"))
    with pytest.raises(cli.CliError) as e:
        cli.run_experiment(cfg, tmp_path / "x", resume=out / "checkpoints" / "round_0001.pfms",
                           progress=lambda s: None)
    assert e.value.code == "E_CHECKPOINT"


def test_standalone_sends_nothing(tmp_path, capsys):
    cfg = tmp_path / "s.toml"
    cfg.write_text(GOLDEN.read_text().replace('"pfedmoe"', '"standalone"'))
    code, out, _ = run_cli(["run", "--config", cfg, "--out", tmp_path / "o"], capsys)
    assert code == 0
    assert "params_tx_cum=0" in out
    rows = list(csv.DictReader(open(tmp_path / "o" / "metrics.csv")))
    assert [int(r["params_tx_cum"]) for r in rows] == [0, 0, 0]
    assert not (tmp_path / "o" / "representations.bin").exists()


def test_summarize_lists_missing_files(golden_bundle, tmp_path, capsys):
    partial = tmp_path / "partial"
    shutil.copytree(golden_bundle[0], partial)
    (partial / "per_client.csv").unlink()
    code, _, err = run_cli(["summarize", partial], capsys)
    assert code == 3 and "per_client.csv" in err
