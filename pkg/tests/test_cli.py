import csv
import io
import json

import numpy as np
import pytest

from twinpp import __version__
from twinpp.cli import RunConfig, ConfigError, main, replay_checkpoint
from twinpp.data import SampleSet, Taxonomy, parse_event_log, parse_profiles
from twinpp.metrics import confusion, f1_plus, macro_prf, mae, mae_plus
from twinpp.model import FORMAT_VERSION

CONFIG = {"simulate": {"n_entities": 24, "horizon": 90.0, "beta": 4.0, "chain_base": 0.02,
                       "chain_forward": 0.7, "chain_self_excite": 0.0},
          "model": {"hidden_dim": 6, "embed_dim": 4},
          "train": {"max_epochs": 2, "learning_rate": 3e-3},
          "hawkes": {"betas": [4.0], "max_iters": 200, "n_rollouts": 20}}


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def work(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "run.json"
    cfg.write_text(json.dumps(CONFIG))
    assert run("simulate", "--config", cfg, "--seed", 3, "--out", root / "sim") == 0
    assert run("prepare", "--config", cfg, "--seed", 3, "--events", root / "sim/events.jsonl",
               "--profiles", root / "sim/profiles.csv", "--taxonomy", root / "sim/taxonomy.json",
               "--out", root / "data") == 0
    assert run("train", "--config", cfg, "--threads", 1, "--data", root / "data",
               "--out", root / "rnn") == 0
    return root


def test_simulate_files_parse(work):
    tax = Taxonomy.loads((work / "sim/taxonomy.json").read_text())
    with open(work / "sim/events.jsonl") as fh:
        log = parse_event_log(fh, tax)
    with open(work / "sim/profiles.csv") as fh:
        prof = parse_profiles(fh)
    manifest = json.loads((work / "sim/manifest.json").read_text())
    assert len(log.records) == sum(e["n_events"] for e in manifest["entities"].values())
    assert set(prof) == set(manifest["entities"])


def test_simulate_is_byte_identical(work, tmp_path):
    assert run("simulate", "--config", work / "run.json", "--seed", 3, "--out", tmp_path) == 0
    for name in ("events.jsonl", "profiles.csv", "manifest.json", "taxonomy.json"):
        assert (tmp_path / name).read_bytes() == (work / "sim" / name).read_bytes()


def test_taxonomy_file_shape(work):
    doc = dict(json.loads((work / "sim/taxonomy.json").read_text())["taxonomy"])
    assert list(doc) == ["ticket", "error"]
    assert len(doc["ticket"]) == 1 and len(doc["error"]) == 6


def test_sample_header_keeps_type_order(work):
    # class ids in the samples must mean the same thing after a JSON round trip
    ss = SampleSet.loads((work / "data/train.jsonl").read_text())
    assert ss.taxonomy.main_types == ["ticket", "error"]
    for s in ss.samples:
        assert ss.taxonomy.parent[s.target_sub] == s.target_main


def test_prepare_splits_are_disjoint(work):
    splits = json.loads((work / "data/splits.json").read_text())
    groups = [set(splits[k]) for k in ("train", "val", "test")]
    assert sum(map(len, groups)) == 24 and len(set.union(*groups)) == 24
    for k, g in zip(("train", "val", "test"), groups):
        assert set(SampleSet.loads((work / f"data/{k}.jsonl").read_text()).entity_ids()) <= g


def test_train_outputs(work):
    ck = json.loads((work / "rnn/checkpoint.json").read_text())
    assert ck["kind"] == "rnn" and ck["variant"] == "intensity-rnn"
    rows = list(csv.reader(io.StringIO((work / "rnn/loss_curve.csv").read_text())))
    assert rows[0] == ["epoch", "train_loss", "val_loss"] and len(rows) == 4
    vals = [float(r[2]) for r in rows[1:]]
    assert int(np.argmin(vals)) == ck["best_epoch"]
    assert json.loads((work / "rnn/run_config.json").read_text())["train"]["max_epochs"] == 2


def test_event_rnn_has_no_time_series_params(work, tmp_path):
    assert run("train", "--config", work / "run.json", "--data", work / "data",
               "--variant", "event-rnn", "--head", "flat", "--out", tmp_path) == 0
    names = json.loads((tmp_path / "checkpoint.json").read_text())["params"]["tensors"]
    assert names and not any(k.startswith("ts.") for k in names)
    assert any(k.startswith("ev.") for k in names)


def test_time_series_rnn_has_no_event_params(work, tmp_path):
    assert run("train", "--config", work / "run.json", "--data", work / "data",
               "--variant", "time-series-rnn", "--epochs", 0, "--out", tmp_path) == 0
    names = json.loads((tmp_path / "checkpoint.json").read_text())["params"]["tensors"]
    assert not any(k.startswith("ev.") for k in names)


def test_missing_samples_leave_nothing(work, tmp_path, capsys):
    out = tmp_path / "never"
    assert run("train", "--data", tmp_path / "nothing", "--out", out) != 0
    assert "not found" in capsys.readouterr().err
    assert not out.exists()


def test_variant_and_baseline_conflict(work, tmp_path, capsys):
    out = tmp_path / "x"
    assert run("train", "--data", work / "data", "--variant", "event-rnn",
               "--baseline", "logistic", "--out", out) == 2
    assert "mutually exclusive" in capsys.readouterr().err
    assert not out.exists()


def test_unknown_config_key(tmp_path):
    with pytest.raises(ConfigError, match="bogus"):
        RunConfig.from_dict({"bogus": 1})
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"learning_rate": -1}}))
    assert run("simulate", "--config", bad, "--out", tmp_path / "o") == 2


def _replayed(work, tmp_path, perfect=True):
    test = SampleSet.loads((work / "data/test.jsonl").read_text())
    rows = [(s.entity_id, s.anchor, s.target_sub if perfect else 0, s.target_gap)
            for s in test.samples]
    ck = tmp_path / "replay.json"
    ck.write_text(replay_checkpoint(test.header(), rows))
    return ck


def test_perfect_replay_scores_one(work, tmp_path):
    ck = _replayed(work, tmp_path)
    assert run("evaluate", "--checkpoint", ck, "--data", work / "data", "--out", tmp_path / "ev") == 0
    rep = json.loads((tmp_path / "ev/report.json").read_text())
    present = [c for c, v in rep["sub"]["per_class"].items() if v["support"] > 0]
    assert all(rep["sub"]["per_class"][c]["f1"] == 1.0 for c in present)
    assert rep["main"]["macro"]["f1"] == 1.0
    assert rep["mae"] == 0.0 and rep["main"]["f1_plus"] == 1.0


def _schema(d):
    if isinstance(d, dict):
        return {k: _schema(v) for k, v in d.items() if k not in ("kind",)}
    return type(d).__name__ if not isinstance(d, (int, float)) else "num"


def test_hawkes_report_schema_matches_rnn(work, tmp_path):
    assert run("train", "--config", work / "run.json", "--data", work / "data",
               "--baseline", "hawkes", "--out", tmp_path / "hk") == 0
    for name, ck in (("h", tmp_path / "hk/checkpoint.json"), ("r", work / "rnn/checkpoint.json")):
        assert run("evaluate", "--config", work / "run.json", "--checkpoint", ck,
                   "--data", work / "data", "--out", tmp_path / name) == 0
    h = json.loads((tmp_path / "h/report.json").read_text())
    r = json.loads((tmp_path / "r/report.json").read_text())
    assert h["kind"] == "hawkes" and r["kind"] == "rnn"
    assert set(h) == set(r) and set(h["sub"]) == set(r["sub"])
    for f in ("report_main.csv", "report_sub.csv", "confusion_sub.csv"):
        assert (tmp_path / "h" / f).read_text().splitlines()[0] == \
            (tmp_path / "r" / f).read_text().splitlines()[0]


def test_report_matches_metric_functions(work, tmp_path):
    assert run("evaluate", "--checkpoint", work / "rnn/checkpoint.json", "--data", work / "data",
               "--out", tmp_path) == 0
    rep = json.loads((tmp_path / "report.json").read_text())
    tax = Taxonomy.loads((work / "data/taxonomy.json").read_text())
    rows = list(csv.DictReader(io.StringIO((tmp_path / "predictions.csv").read_text())))
    ts = [tax.sub_id(r["true_sub"]) for r in rows]
    ps = [tax.sub_id(r["pred_sub"]) for r in rows]
    tg = [float(r["true_gap"]) for r in rows]
    pg = [float(r["pred_gap"]) for r in rows]
    assert rep["n_samples"] == len(rows)
    assert rep["mae"] == mae(pg, tg)
    assert rep["sub"]["macro"]["f1"] == macro_prf(confusion(ps, ts, 7)).macro_f1
    assert rep["sub"]["confusion"] == confusion(ps, ts, 7).counts.tolist()
    fp = f1_plus(ps, ts, pg, tg, 7)
    assert (rep["sub"]["f1_plus"], rep["sub"]["f1_plus_count"]) == (fp.value, fp.count)
    mp = mae_plus(ps, ts, pg, tg)
    assert (rep["sub"]["mae_plus"], rep["sub"]["mae_plus_count"]) == (mp.value, mp.count)


def _predict(work, capsys, entity, at, ck=None):
    rc = run("predict", "--checkpoint", ck or work / "rnn/checkpoint.json",
             "--events", work / "sim/events.jsonl", "--profiles", work / "sim/profiles.csv",
             "--entity", entity, "--at", at)
    cap = capsys.readouterr()
    return rc, cap.out, cap.err


def test_predict_json(work, capsys):
    rc, out, _ = _predict(work, capsys, "e0000", 60.0)
    assert rc == 0
    doc = json.loads(out)
    assert doc["gap_days"] >= 0 and doc["anchor"] <= 60.0
    assert doc["predicted_time"] == doc["anchor"] + doc["gap_days"]
    assert doc["sub_type"] in Taxonomy.loads((work / "sim/taxonomy.json").read_text()).sub_types
    assert _predict(work, capsys, "e0000", 60.0)[1] == out


def test_predict_insufficient_history(work, capsys):
    rc, _, err = _predict(work, capsys, "e0000", 0.0)
    assert rc != 0 and "insufficient history" in err
    rc, _, err = _predict(work, capsys, "nobody", 50.0)
    assert rc != 0


def test_predict_with_logistic(work, tmp_path, capsys):
    assert run("train", "--data", work / "data", "--baseline", "logistic", "--out", tmp_path) == 0
    rc, out, _ = _predict(work, capsys, "e0001", 80.0, tmp_path / "checkpoint.json")
    assert rc == 0 and json.loads(out)["kind"] == "logistic"


def test_threads_from_environment(work, tmp_path, monkeypatch):
    monkeypatch.setenv("TWINPP_THREADS", "0")
    assert run("simulate", "--out", tmp_path, "--entities", 2, "--horizon", 5) == 2


def test_version(capsys):
    with pytest.raises(SystemExit) as exc:
        run("--version")
    assert exc.value.code == 0
    out = capsys.readouterr().out
    assert __version__ in out and f"format {FORMAT_VERSION}" in out
