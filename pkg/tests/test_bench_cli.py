import csv
import io
import json

import pytest

from semsearch import cli
from semsearch.bench import (
    CSV_FIELDS,
    ConfigError,
    ExperimentConfig,
    Outcome,
    action_counts,
    build_corpus,
    delta_pct,
    metrics_row,
    run_bench,
    standard_error,
    write_csv,
)
from semsearch.openworld import rect_mask, rle_encode
from semsearch.providers import ENDPOINT_ENV
from semsearch.taxonomy import load_taxonomy


def test_statistics_frozen_values():
    assert standard_error([1, 2, 3, 4, 10]) == pytest.approx(1.5811388, abs=1e-7)
    assert standard_error([3]) == 0.0
    assert round(delta_pct(5.56, 3.76), 1) == 32.4


def test_failure_conventions():
    out = [Outcome(0, True, 2, 10), Outcome(1, False, 4, 10), Outcome(2, True, 3, 10)]
    assert action_counts(out) == [2, 10, 3]
    assert action_counts(out, "exclude") == [2, 3]
    row = metrics_row("m", "pharmacy", 5, out)
    assert (row.successes, row.total, row.mean_actions) == (2, 3, 5.0)
    assert row.mean_actions_success_only == 2.5


def test_config_validation(tmp_path):
    with pytest.raises(ConfigError):
        ExperimentConfig(domain="garage")
    with pytest.raises(ConfigError):
        ExperimentConfig(methods=("magic",))
    with pytest.raises(ConfigError):
        ExperimentConfig(noise_p=(1.5,))
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"scenes": 3})
    (tmp_path / "bad.yaml").write_text("domain: [unclosed\n")
    with pytest.raises(ConfigError):
        ExperimentConfig.from_file(tmp_path / "bad.yaml")
    (tmp_path / "ok.yaml").write_text("domain: kitchen\nn_objects: [6]\nscenes_per_n: 2\n")
    cfg = ExperimentConfig.from_file(tmp_path / "ok.yaml", seed=4)
    assert cfg.domain == "kitchen" and cfg.n_objects == (6,) and cfg.seed == 4


def test_corpus_is_deterministic_and_scaled():
    tax = load_taxonomy("office")
    a = build_corpus(tax, "office", 6, 3, seed=2)
    b = build_corpus(tax, "office", 6, 3, seed=2)
    assert a.checksum() == b.checksum()
    assert max(max(o.spec.dims) for s in a.scenes for o in s.objects) <= 0.25


@pytest.fixture(scope="module")
def tiny_rows():
    cfg = ExperimentConfig(n_objects=(6,), scenes_per_n=4, methods=("spatial-only", "sms-oracle"))
    return cfg, run_bench(cfg)


def _csv(rows):
    buf = io.StringIO()
    write_csv(rows, buf)
    return buf.getvalue()


def test_bench_rows_and_csv(tiny_rows):
    cfg, rows = tiny_rows
    text = _csv(rows)
    parsed = list(csv.DictReader(io.StringIO(text)))
    assert list(parsed[0]) == CSV_FIELDS
    assert [(r["method"], r["n"]) for r in parsed] == [("spatial-only", "6"), ("spatial-only", "avg"), ("sms-oracle", "6"), ("sms-oracle", "avg")]
    assert parsed[0]["delta_pct"] == "" and parsed[2]["delta_pct"] != ""
    assert all(int(r["total"]) == 4 for r in parsed)


def test_bench_is_deterministic_across_workers(tiny_rows):
    cfg, rows = tiny_rows
    again = run_bench(ExperimentConfig(n_objects=(6,), scenes_per_n=4, methods=("spatial-only", "sms-oracle"), workers=2))
    assert _csv(again) == _csv(rows)


def test_noise_sweep_labels():
    rows = run_bench(ExperimentConfig(n_objects=(6,), scenes_per_n=1, methods=("spatial-only", "sms-oracle"), noise_p=(0.0, 0.5)))
    assert [r.method for r in rows if r.n == 6] == ["spatial-only", "sms-oracle@noise=0", "sms-oracle@noise=0.5"]


# --- CLI -------------------------------------------------------------------------


def test_cli_config_errors_exit_2(tmp_path, capsys):
    assert cli.main(["bench", "--domain", "garage"]) == 2
    assert cli.main(["bench", "--config", str(tmp_path / "missing.yaml")]) == 2
    (tmp_path / "c.yaml").write_text("bogus: 1\n")
    assert cli.main(["bench", "--config", str(tmp_path / "c.yaml")]) == 2
    assert cli.main(["eval-affinity", str(tmp_path / "m.json"), "--domain", "nowhere"]) == 2
    assert cli.main(["rollout", "--scene", str(tmp_path / "none.json")]) == 2
    assert "config error" in capsys.readouterr().err


def test_cli_provider_failure_exits_3(tmp_path, monkeypatch):
    monkeypatch.delenv(ENDPOINT_ENV, raising=False)
    (tmp_path / "empty.jsonl").write_text("")
    rc = cli.main(["build-affinity", "--provider", "prompt-scorer", "--path", str(tmp_path / "empty.jsonl"), "--out", str(tmp_path / "m.json")])
    assert rc == 3
    monkeypatch.setenv(ENDPOINT_ENV, "http://127.0.0.1:9/score")
    monkeypatch.setattr("semsearch.providers.time.sleep", lambda s: None)
    rc = cli.main(["build-affinity", "--provider", "prompt-scorer", "--domain", "pharmacy", "--max-in-flight", "1", "--out", str(tmp_path / "m.json")])
    assert rc == 3


def test_cli_affinity_round_trip(tmp_path, capsys):
    out = tmp_path / "oracle.json"
    assert cli.main(["build-affinity", "--provider", "taxonomy-oracle", "--out", str(out)]) == 0
    assert cli.main(["eval-affinity", str(out), "--out", str(tmp_path / "r.json")]) == 0
    assert "mean_jsd=0.0000 improvement=100.0%" in capsys.readouterr().out
    assert json.loads((tmp_path / "r.json").read_text())["improvement"] == 1.0
    assert cli.main(["build-affinity", "--provider", "scripted", "--seed", "2", "--out", str(tmp_path / "s.json")]) == 0
    assert cli.main(["eval-affinity", str(tmp_path / "s.json")]) == 0


def test_cli_gen_scenes_and_rollout(tmp_path, capsys):
    out = tmp_path / "scenes"
    assert cli.main(["gen-scenes", "--n", "6", "--count", "2", "--out", str(out)]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["sets"][0]["count"] == 2
    first = capsys.readouterr().out
    assert cli.main(["gen-scenes", "--n", "6", "--count", "2", "--out", str(tmp_path / "again")]) == 0
    assert capsys.readouterr().out == first
    scene = out / "scene_n6_0000.json"
    assert cli.main(["rollout", "--scene", str(scene), "--trace", "--domain", "pharmacy", "--oracle", "--check"]) == 0
    text = capsys.readouterr().out
    assert text.startswith("step,action_kind,object,dx,dy,score,target_visibility\n")
    assert "# success=" in text
    assert cli.main(["rollout", "--scene", str(scene), "--oracle"]) == 2


def test_cli_bench_writes_csv(tmp_path, capsys):
    out = tmp_path / "bench.csv"
    rc = cli.main(["bench", "--n", "6", "--scenes", "2", "--methods", "spatial-only", "sms-oracle", "--out", str(out)])
    assert rc == 0
    assert out.read_text().splitlines()[0] == ",".join(CSV_FIELDS)
    assert "spatial-only" in capsys.readouterr().out


def test_cli_openworld_eval(tmp_path, capsys):
    fx = tmp_path / "fx"
    fx.mkdir()
    data = {
        "width": 4,
        "height": 2,
        "target": "aspirin",
        "crops": [{"rect": [0, 0, 2, 2], "label": "advil", "relevance": 1.0}, {"rect": [2, 0, 4, 2], "label": "lotion", "relevance": 1.0}],
        "truth_rle": rle_encode(rect_mask((0, 0, 2, 2), 4, 2)),
    }
    (fx / "one.json").write_text(json.dumps(data))
    assert cli.main(["openworld-eval", str(fx)]) == 2
    assert cli.main(["openworld-eval", str(fx), "--scorer", "scripted"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "method,images,mean_iou,stderr" and lines[1].startswith("default,1,")
    assert cli.main(["openworld-eval", str(tmp_path / "nothing")]) == 2
