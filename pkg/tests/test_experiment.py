import json

import pytest

from colorvar import cli
from colorvar.clustering import ClusterAssignment
from colorvar.experiment import (ExperimentConfig, RunResult, StageError, comparison_table, desk_config,
                                 load_config, read_truth, run_experiment, select_best)
from colorvar.metrics import EvalReport, evaluate
from colorvar.model import load_embeddings
from colorvar.trainers import RunManifest


def _small(tmp_path, method="pbcnet", **kw):
    cfg = desk_config(method, out=str(tmp_path / method), epochs=2, n_styles=6, n_eval_styles=3, **kw)
    cfg.encoder.input_side = 32
    cfg.encoder.width = 8
    return cfg


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    return run_experiment(_small(tmp_path_factory.mktemp("run")))


def test_every_eval_image_gets_exactly_one_cluster(small_run):
    a = ClusterAssignment.load_jsonl(small_run.out / "best.assign.jsonl")
    assert sorted(a.ids) == sorted(small_run.eval_ids) and len(a.ids) == 12
    assert small_run.eval_split == "eval"
    for name in ("config.json", "truth.jsonl", "checkpoint.pt", "checkpoint.manifest.json", "report.json",
                 "best_report.json", "embeddings.ids.txt", "embeddings.f32"):
        assert (small_run.out / name).exists(), name
    assert list((small_run.out / "clusters").glob("*.png"))


def test_report_recomputes_offline_from_artifacts(small_run):
    out = small_run.out
    report = json.loads((out / "report.json").read_text())
    best = report["best"]
    a = ClusterAssignment.load_jsonl(out / f"sweep/{best['sweep_index']:03d}.assign.jsonl")
    again = evaluate(read_truth(out / "truth.jsonl"), a)
    assert again.to_dict() == {k: best[k] for k in again.to_dict()}
    emb = load_embeddings(out / "embeddings")
    from colorvar.clustering import agglomerative_ward
    assert agglomerative_ward(emb, best["value"]).labels == a.labels
    assert report["seed"] == 0 and report["config"]["train"]["method"] == "pbcnet"


def test_best_report_has_no_timing(small_run):
    assert "wall" not in small_run.best_json()


def test_select_best_breaks_ties():
    def rep(c, a):
        return EvalReport(0.0, a, 0.0, c, 1, 1, 0, a, False)
    pts = [(0.5, rep(0.4, 0.3)), (0.2, rep(0.4, 0.3)), (0.1, rep(0.4, 0.2)), (0.9, rep(0.1, 0.9))]
    assert select_best(pts) == 1


def _result(ids, label, split="eval"):
    cfg = desk_config("pbcnet", name=label)
    rep = EvalReport(1.0, 1.0, 1.0, 1.0, 1, 1, 1, 1.0, True)
    return RunResult(cfg, rep, 1.0, split, ids, None, RunManifest({}, {}, 0, 0))


def test_comparison_requires_matching_eval_split():
    table = comparison_table([_result(["a", "b"], "x"), _result(["a", "b"], "x")])
    assert "x#2" in table.splitlines()[0]
    with pytest.raises(ValueError, match="eval split"):
        comparison_table([_result(["a", "b"], "x"), _result(["a", "c"], "y")])
    with pytest.raises(ValueError):
        comparison_table([_result(["a"], "x")])


def test_config_round_trip_and_validation(tmp_path):
    cfg = _small(tmp_path)
    path = tmp_path / "c.json"
    path.write_text(json.dumps(cfg.to_dict()))
    back = load_config(path)
    assert back.to_dict() == cfg.to_dict()
    toml = tmp_path / "c.toml"
    toml.write_text('manifest = "m.jsonl"\nsweep = { linspace = [0.1, 1.0, 10] }\n[train]\nmethod = "mocov2"\n')
    t = load_config(toml)
    assert t.manifest == str(tmp_path / "m.jsonl") and len(t.sweep) == 10
    assert t.encoder.head == "projector_mlp"
    with pytest.raises(ValueError, match="unknown keys"):
        ExperimentConfig.from_dict({"trian": {}})
    both = cfg.to_dict()
    both["manifest"] = "x.jsonl"
    with pytest.raises(ValueError, match="exactly one"):
        ExperimentConfig.from_dict(both).validate()
    empty = cfg.to_dict()
    empty["sweep"] = []
    with pytest.raises(ValueError, match="sweep"):
        ExperimentConfig.from_dict(empty).validate()


def test_method_override_keeps_desk_settings(tmp_path):
    cfg = _small(tmp_path, method="mocov2").with_overrides(method="byol", seed=4)
    assert cfg.train.method == "byol" and cfg.train.batch_size == 8 and cfg.train.seed == 4
    assert cfg.encoder.head_dims == [256, 64, 256]


def test_stage_failure_is_tagged(tmp_path):
    cfg = _small(tmp_path)
    cfg.synthetic = None
    cfg.manifest = str(tmp_path / "missing.jsonl")
    with pytest.raises(StageError) as err:
        run_experiment(cfg)
    assert err.value.stage == "data"


def test_cli_pipeline_verbs(tmp_path, capsys):
    data = tmp_path / "data"
    assert cli.main(["generate", "--out", str(data), "--styles", "4", "--eval-styles", "2", "--canvas", "48"]) == 0
    cfg = _small(tmp_path)
    cfg.synthetic = None
    cfg.manifest = str(data / "manifest.jsonl")
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps(cfg.to_dict()))
    run_dir = tmp_path / "r"
    assert cli.main(["train", str(cfg_path), "--out", str(run_dir)]) == 0
    assert cli.main(["embed", "--checkpoint", str(run_dir / "checkpoint.pt"), "--manifest",
                     str(data / "manifest.jsonl"), "--split", "eval", "--slice-mode", "both",
                     "--out", str(tmp_path / "e" / "emb")]) == 0
    assert cli.main(["cluster", "--embeddings", str(tmp_path / "e" / "emb"), "--value", "0.5",
                     "--out", str(tmp_path / "a.jsonl")]) == 0
    capsys.readouterr()
    assert cli.main(["evaluate", "--assignment", str(tmp_path / "a.jsonl"), "--manifest",
                     str(data / "manifest.jsonl")]) == 0
    assert set(json.loads(capsys.readouterr().out)) >= {"cgacc", "ari", "fms", "cscore"}


def test_cli_failure_exit_code_and_stage_tag(tmp_path, capsys):
    code = cli.main(["cluster", "--embeddings", str(tmp_path / "nope"), "--value", "1", "--out",
                     str(tmp_path / "a.jsonl")])
    assert code != 0
    assert capsys.readouterr().err.startswith("colorvar: [cluster]")
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"train": {"method": "pbcnet"}}))
    assert cli.main(["run", str(bad)]) != 0
    assert "[config]" in capsys.readouterr().err
