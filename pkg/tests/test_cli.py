import json

import numpy as np
import pytest
import yaml

from crl.cli import (ConfigError, build_stream, export_embeddings, load_config, main,
                     parse_config, run_experiment)
from crl.continual import AccuracyMatrix, run_sequence
from crl.data import save_jsonl, synth_stream

TINY = {
    "tasks": 2,
    "seeds": [1],
    "synthetic": {"classes": 4, "dim": 8, "train_per_class": 12, "sigma": 0.3},
    "epochs_init": 1,
    "epochs_replay": 1,
    "d_h": 4,
    "memory_size": 3,
}


def write_config(tmp_path, **kw):
    raw = dict(TINY)
    raw.update(kw)
    raw["out"] = str(tmp_path / "out")
    p = tmp_path / "cfg.yaml"
    p.write_text(yaml.safe_dump(raw))
    return p


def test_run_k1_single_column(tmp_path, capsys):
    cfg = write_config(tmp_path, tasks=1)
    assert main(["run", "--config", str(cfg)]) == 0
    out = tmp_path / "out"
    lines = (out / "matrix_full_seed1.csv").read_text().splitlines()
    assert lines[0] == "after_task,acc_overall,acc_T1" and len(lines) == 2
    assert (out / "summary.csv").read_text().splitlines()[0] == "variant,T1"
    summary = json.loads((out / "summary.json").read_text())
    assert summary["config"]["tasks"] == 1 and "wall_time_s" in summary


def test_memory_size_override_only_changes_O(tmp_path):
    cfg = write_config(tmp_path)
    echoes = []
    for O in ("5", "20"):
        out = tmp_path / f"o{O}"
        assert main(["run", "--config", str(cfg), "--memory-size", O, "--out", str(out)]) == 0
        echoes.append(json.loads((out / "summary.json").read_text())["config"])
    diff = {k for k in echoes[0] if echoes[0][k] != echoes[1][k]}
    assert diff == {"memory_sizes", "out"}
    assert echoes[0]["memory_sizes"] == [5] and echoes[1]["memory_sizes"] == [20]


def test_invalid_config_field_message(tmp_path, capsys):
    cfg = write_config(tmp_path, tau_contrastive=-1)
    assert main(["run", "--config", str(cfg)]) == 2
    assert "temperatures" in capsys.readouterr().err
    cfg = write_config(tmp_path, bogus=3)
    assert main(["run", "--config", str(cfg)]) == 2
    assert "bogus" in capsys.readouterr().err


@pytest.mark.parametrize("raw,msg", [
    ({"seeds": []}, "seeds"),
    ({"variants": ["nope"]}, "variants"),
    ({"path": "x.jsonl"}, "exactly one"),
])
def test_parse_config_errors(raw, msg):
    merged = dict(TINY)
    merged.update(raw)
    with pytest.raises(ConfigError, match=msg):
        parse_config(merged)


def test_flags_override_file(tmp_path):
    cfg = load_config(write_config(tmp_path), {"seeds": "3,4", "variant": "no_kd,full"})
    assert cfg.seeds == [3, 4] and cfg.variants == ["no_kd", "full"]


def test_summary_mean_is_mean_of_seed_matrices(tmp_path):
    cfg = load_config(write_config(tmp_path), {"seeds": "1,2,3"})
    report = run_experiment(cfg, tmp_path / "out")
    mats = [AccuracyMatrix.from_csv((tmp_path / "out" / f"matrix_full_seed{s}.csv").read_text())
            for s in (1, 2, 3)]
    mean, _ = report.aggregate("full")
    np.testing.assert_allclose(mean, np.mean([m.overall for m in mats], axis=0), atol=1e-6)
    row = (tmp_path / "out" / "summary.csv").read_text().splitlines()[1].split(",")
    np.testing.assert_allclose([float(v) for v in row[1:]], 100 * mean, atol=0.006)


def test_mid_run_failure_keeps_partial_outputs(tmp_path, monkeypatch):
    import crl.cli as cli
    calls = {"n": 0}
    real = cli.run_sequence

    def flaky(stream, config, **kw):
        calls["n"] += 1
        if calls["n"] == 2:
            raise RuntimeError("boom")
        return real(stream, config, **kw)

    monkeypatch.setattr(cli, "run_sequence", flaky)
    cfg = write_config(tmp_path, seeds=[1, 2])
    assert main(["run", "--config", str(cfg)]) == 1
    assert (tmp_path / "out" / "matrix_full_seed1.csv").exists()
    assert not (tmp_path / "out" / "summary.json").exists()


def test_memory_sweep_rows(tmp_path):
    cfg = load_config(write_config(tmp_path), {"memory_size": "2,3"})
    report = run_experiment(cfg, tmp_path / "out")
    assert list(report.matrices) == ["full@O=2", "full@O=3"]
    assert (tmp_path / "out" / "matrix_full_O2_seed1.csv").exists()


def test_dataset_file_source(tmp_path):
    ds = synth_stream(4, 8, 20, 0.3, seed=0)
    data = tmp_path / "d.jsonl"
    save_jsonl(ds, data)
    raw = {k: v for k, v in TINY.items() if k != "synthetic"}
    raw.update(path=str(data), out=str(tmp_path / "out"))
    p = tmp_path / "c.yaml"
    p.write_text(yaml.safe_dump(raw))
    assert main(["run", "--config", str(p)]) == 0


def read_tsv(path):
    return [line.split("\t") for line in path.read_text().splitlines()]


def test_export_embeddings_shape_bytes_and_values(tmp_path):
    cfg = load_config(write_config(tmp_path))
    stream = build_stream(cfg, 1)
    _, learner = run_sequence(stream, cfg.train_config(1, "full", 3))
    subset = stream.tasks[0].train.subset(np.arange(10))
    a, b = tmp_path / "a.tsv", tmp_path / "b.tsv"
    export_embeddings(learner, subset, a)
    export_embeddings(learner, subset, b)
    assert a.read_bytes() == b.read_bytes()
    rows = read_tsv(a)
    assert len(rows) == 10 and all(len(r) == 3 + 2 for r in rows)
    vecs = np.array([[float(v) for v in r[3:]] for r in rows])
    np.testing.assert_allclose(vecs, learner.embed(subset.features), atol=1e-12, rtol=0)
    assert [int(r[0]) for r in rows] == subset.ids.tolist()
    assert [r[1] for r in rows] == [subset.vocab[y] for y in subset.labels]


def test_export_embeddings_command(tmp_path):
    cfg = write_config(tmp_path)
    out = tmp_path / "emb.tsv"
    assert main(["export-embeddings", "--config", str(cfg), "--task", "2", "--out", str(out)]) == 0
    rows = read_tsv(out)
    assert rows and all(len(r) == 5 for r in rows)
    assert main(["export-embeddings", "--config", str(cfg), "--task", "9",
                 "--out", str(out)]) == 2
