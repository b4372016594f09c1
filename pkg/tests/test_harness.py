import json
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner

from dynrank.cli import main
from dynrank.data import DataError, gen_synthetic
from dynrank.harness import (
    ConfigError,
    DatasetSpec,
    RunConfig,
    RunReport,
    baseline_ranking,
    config_from_dict,
    config_to_dict,
    emit_report,
    evaluate_baseline,
    evaluate_run,
    load_config,
    load_dataset,
    make_feedback,
    metrics_run,
    report_from_dict,
    report_to_dict,
    run,
    train_run,
)
from dynrank.metrics import MetricSpec
from dynrank.policy import PolicyConfig
from dynrank.valuenet import NetConfig


def tiny_config(out_dir, **kw) -> RunConfig:
    defaults = dict(
        dataset=DatasetSpec(kind="synthetic", num_topics=4, docs_per_topic=10,
                            subtopics_per_topic=2, dim=6),
        net=NetConfig(layers=1, input_dim=12, hidden_dims=(6,), dense_dims=(4,),
                      window=3, dropout=0.0, learning_rate=0.1, output="sigmoid"),
        policy=PolicyConfig(epsilon=0.3, docs_per_iteration=2, iterations=2,
                            selection="sample", seed=0, epoch_cap=2, stop_tol=0.0),
        metric=MetricSpec(target="ndcg", report=("alpha-ndcg", "ndcg@5")),
        folds=2,
        seed=0,
        out_dir=str(out_dir),
    )
    defaults.update(kw)
    return RunConfig(**defaults)


class TestConfig:
    def test_round_trip(self, tmp_path):
        config = tiny_config(tmp_path / "o")
        assert config_from_dict(config_to_dict(config)) == config

    def test_unknown_key_rejected(self):
        with pytest.raises(ConfigError):
            config_from_dict({"nope": 1})

    def test_bad_nested_value_rejected(self):
        with pytest.raises(ConfigError):
            config_from_dict({"policy": {"epsilon": 2.0}})

    def test_load_config_file(self, tmp_path):
        config = tiny_config(tmp_path / "o")
        path = tmp_path / "config.json"
        path.write_text(json.dumps(config_to_dict(config)))
        assert load_config(path) == config

    def test_load_config_malformed(self, tmp_path):
        path = tmp_path / "config.json"
        path.write_text("{")
        with pytest.raises(ConfigError):
            load_config(path)

    def test_dataset_spec_validation(self):
        with pytest.raises(ConfigError):
            DatasetSpec(kind="trec_dd")
        with pytest.raises(ConfigError):
            DatasetSpec(kind="nope")

    def test_dim_consistency_checked(self, tmp_path):
        config = tiny_config(tmp_path, net=NetConfig(layers=1, input_dim=99, hidden_dims=(6,),
                                                     dense_dims=(4,), window=3, dropout=0.0))
        with pytest.raises(ConfigError, match="input_dim"):
            train_run(config)


class TestReportSerialization:
    def test_round_trip_equality(self):
        report = RunReport(
            command="evaluate",
            config={"seed": 0},
            folds=[{"fold": 0, "test_topics": ["t0"]}],
            tables={"evaluation": [[1, "ndcg", 0.5, 0.1]]},
            notes=["n"],
            wall_time=1.23,
        )
        back = report_from_dict(report_to_dict(report))
        assert back == report  # wall_time excluded from comparison
        assert back.wall_time is None

    def test_emit_csv_and_json(self, tmp_path):
        report = RunReport(
            command="evaluate", config={},
            tables={"evaluation": [(1, "ndcg", 0.25, 0.0), (2, "ndcg", 0.5, 0.1)]},
        )
        files = emit_report(report, tmp_path)
        names = {f.name for f in files}
        assert names == {"report.json", "evaluation.csv"}
        lines = (tmp_path / "evaluation.csv").read_text().splitlines()
        assert lines[0] == "iteration,metric_name,mean,stddev"
        assert len(lines) == 3

    def test_wall_time_lands_in_sidecar(self, tmp_path):
        report = RunReport(command="train", config={}, wall_time=2.0)
        emit_report(report, tmp_path)
        assert json.loads((tmp_path / "timing.json").read_text())["wall_time_seconds"] == 2.0
        assert "wall_time" not in (tmp_path / "report.json").read_text()


class TestTrainEvaluate:
    def test_train_writes_checkpoints_and_logs(self, tmp_path):
        config = tiny_config(tmp_path)
        report = train_run(config)
        assert (tmp_path / "checkpoints" / "fold0.ckpt").exists()
        assert (tmp_path / "checkpoints" / "fold1.ckpt").exists()
        log = (tmp_path / "train_fold0.csv").read_text().splitlines()
        assert log[0] == "epoch,mean_loss,epsilon"
        assert len(log) == 3
        assert len(report.folds) == 2

    def test_evaluate_requires_checkpoints(self, tmp_path):
        config = tiny_config(tmp_path)
        with pytest.raises(DataError, match="checkpoint"):
            evaluate_run(config)

    def test_evaluate_table_shape(self, tmp_path):
        config = tiny_config(tmp_path)
        train_run(config)
        report = evaluate_run(config)
        rows = report.tables["evaluation"]
        iterations = {r[0] for r in rows}
        names = {r[1] for r in rows}
        assert iterations == {1, 2}
        assert names == {"alpha-ndcg", "ndcg@5"}
        for _, _, mean, std in rows:
            assert 0.0 <= mean <= 1.0 and std >= 0.0

    def test_per_fold_rows_cover_folds_iterations_metrics(self, tmp_path):
        config = tiny_config(tmp_path)
        train_run(config)
        report = evaluate_run(config)
        by_fold = report.tables["evaluation_by_fold"]
        n_metrics = len(config.metric.report)
        assert len(by_fold) == config.folds * config.policy.iterations * n_metrics
        assert all("evaluation" in f for f in report.folds)
        emit_report(report, config.out_dir)
        lines = (tmp_path / "evaluation_by_fold.csv").read_text().splitlines()
        assert lines[0] == "fold,iteration,metric_name,mean,stddev"
        assert len(lines) - 1 == len(by_fold)

    def test_offline_metrics_match_evaluate(self, tmp_path):
        config = tiny_config(tmp_path)
        train_run(config)
        eval_report = evaluate_run(config)
        emit_report(eval_report, config.out_dir)
        offline = metrics_run(config, Path(config.out_dir) / "run.jsonl")
        assert offline.tables["evaluation"] == eval_report.tables["evaluation"]

    def test_run_dispatch_writes_reports(self, tmp_path):
        config = tiny_config(tmp_path)
        report = run(config, "train")
        assert report.wall_time is not None
        assert (tmp_path / "report.json").exists()
        run(config, "evaluate")
        assert (tmp_path / "evaluation.csv").exists()
        assert (tmp_path / "run.jsonl").exists()

    def test_unknown_command_rejected(self, tmp_path):
        with pytest.raises(ConfigError):
            run(tiny_config(tmp_path), "explode")


class TestDeterminism:
    def test_byte_identical_runs(self, tmp_path):
        import shutil

        out = tmp_path / "out"
        config = tiny_config(out)

        def snapshot():
            run(config, "train")
            run(config, "evaluate")
            tree = {
                str(p.relative_to(out)): p.read_bytes()
                for p in sorted(out.rglob("*"))
                if p.is_file() and p.name != "timing.json"
            }
            shutil.rmtree(out)
            return tree

        first = snapshot()
        second = snapshot()
        assert first.keys() == second.keys()
        for key in first:
            assert first[key] == second[key], f"{key} differs between runs"

    def test_config_echo_reproduces_run(self, tmp_path):
        config = tiny_config(tmp_path)
        report = train_run(config)
        assert config_from_dict(report.config) == config


class TestAblate:
    def test_emits_four_variant_tables(self, tmp_path):
        config = tiny_config(tmp_path)
        report = run(config, "ablate")
        variant_tables = [k for k in report.tables if k.startswith("evaluation:")]
        assert len(variant_tables) == 4
        assert (tmp_path / "ablation_summary.csv").exists()
        for variant in ("embed-rocchio", "classic-rocchio", "nqe", "no-feedback"):
            assert (tmp_path / "ablate" / variant / "evaluation.csv").exists()

    def test_variants_differ_only_in_feedback(self, tmp_path):
        config = tiny_config(tmp_path)
        report = run(config, "ablate")
        echoes = []
        for variant in ("embed-rocchio", "no-feedback"):
            sub = json.loads((tmp_path / "ablate" / variant / "report.json").read_text())
            echoes.append(sub["config"])
        diff_keys = {
            k for k in echoes[0]
            if echoes[0][k] != echoes[1][k]
        }
        assert diff_keys == {"feedback", "out_dir"}

    def test_vector_corpus_notes_term_fallback(self, tmp_path):
        config = tiny_config(tmp_path, feedback="classic-rocchio")
        ds = load_dataset(config.dataset, config.seed)
        fn, notes = make_feedback(config, ds)
        assert fn is None
        assert notes and "vector-only" in notes[0]


class TestSweep:
    def test_sweep_table(self, tmp_path):
        config = tiny_config(tmp_path, metric=MetricSpec(target="ndcg", report=("ndcg@5",)))
        report = run(config, "sweep-layers")
        rows = report.tables["sweep"]
        assert [r[0] for r in rows] == [1, 2, 3, 4]
        assert all(r[1] == "ndcg@5" for r in rows)
        assert (tmp_path / "sweep_layers.csv").exists()


class TestBaselines:
    def test_random_deterministic(self):
        ds = gen_synthetic(3, 12, 2, 8, seed=0)
        a = baseline_ranking(ds, "t000", "random", 5, seed=1)
        b = baseline_ranking(ds, "t000", "random", 5, seed=1)
        assert a.doc_ids == b.doc_ids

    def test_cosine_orders_by_similarity(self):
        ds = gen_synthetic(1, 20, 1, 8, seed=0)
        from dynrank.embedspace import cosine

        ranked = baseline_ranking(ds, "t000", "cosine", 20, seed=0)
        q = ds.query_vector("t000")
        sims = [cosine(ds.corpus.vectors[d], q) for d in ranked.doc_ids]
        assert all(a >= b - 1e-12 for a, b in zip(sims, sims[1:]))

    def test_evaluate_baseline_values(self):
        ds = gen_synthetic(3, 12, 2, 8, seed=0)
        vals = evaluate_baseline(ds, ds.topic_ids(), "cosine", "ndcg@5",
                                 MetricSpec(), k=5, seed=0)
        assert len(vals) == 3
        assert all(0.0 <= v <= 1.0 for v in vals)


class TestCli:
    def test_train_then_evaluate(self, tmp_path):
        config = tiny_config(tmp_path / "out")
        cfg_path = tmp_path / "c.json"
        cfg_path.write_text(json.dumps(config_to_dict(config)))
        runner = CliRunner()
        res = runner.invoke(main, ["train", "--config", str(cfg_path)])
        assert res.exit_code == 0, res.output
        res = runner.invoke(main, ["evaluate", "--config", str(cfg_path)])
        assert res.exit_code == 0, res.output
        assert "iteration" not in res.output or res.output  # table printed
        assert (tmp_path / "out" / "evaluation.csv").exists()

    def test_config_error_exit_code(self, tmp_path):
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps({"policy": {"epsilon": 5.0}}))
        res = CliRunner().invoke(main, ["train", "--config", str(bad)])
        assert res.exit_code == 2

    def test_data_error_exit_code(self, tmp_path):
        config = tiny_config(tmp_path / "out")
        cfg_path = tmp_path / "c.json"
        cfg_path.write_text(json.dumps(config_to_dict(config)))
        res = CliRunner().invoke(main, ["evaluate", "--config", str(cfg_path)])
        assert res.exit_code == 3  # no checkpoints yet

    def test_overrides_apply(self, tmp_path):
        config = tiny_config(tmp_path / "out")
        cfg_path = tmp_path / "c.json"
        cfg_path.write_text(json.dumps(config_to_dict(config)))
        out2 = tmp_path / "other"
        res = CliRunner().invoke(main, [
            "train", "--config", str(cfg_path), "--out", str(out2), "--seed", "3",
        ])
        assert res.exit_code == 0, res.output
        echo = json.loads((out2 / "report.json").read_text())["config"]
        assert echo["seed"] == 3
        assert echo["out_dir"] == str(out2)

    def test_metric_override_sets_target(self, tmp_path):
        config = tiny_config(tmp_path / "out")
        cfg_path = tmp_path / "c.json"
        cfg_path.write_text(json.dumps(config_to_dict(config)))
        res = CliRunner().invoke(main, [
            "train", "--config", str(cfg_path), "--metric", "alpha-ndcg",
        ])
        assert res.exit_code == 0, res.output
        echo = json.loads((tmp_path / "out" / "report.json").read_text())["config"]
        assert echo["metric"]["report"] == ["alpha-ndcg"]
        assert echo["metric"]["target"] == "alpha-dcg"


LETOR_LINES = """\
2 qid:1 1:0.9 2:0.1 3:0.2 4:0.1
1 qid:1 1:0.6 2:0.2 3:0.1 4:0.3
0 qid:1 1:0.1 2:0.8 3:0.4 4:0.2
0 qid:1 1:0.2 2:0.7 3:0.6 4:0.1
2 qid:2 1:0.8 2:0.2 3:0.1 4:0.2
0 qid:2 1:0.1 2:0.9 3:0.3 4:0.4
1 qid:2 1:0.7 2:0.1 3:0.2 4:0.1
0 qid:2 1:0.3 2:0.6 3:0.5 4:0.3
2 qid:3 1:0.9 2:0.0 3:0.3 4:0.2
0 qid:3 1:0.2 2:0.8 3:0.2 4:0.1
1 qid:3 1:0.6 2:0.3 3:0.1 4:0.4
0 qid:3 1:0.1 2:0.7 3:0.4 4:0.2
"""


class TestFeatureMode:
    def make_config(self, tmp_path):
        letor = tmp_path / "letor.txt"
        letor.write_text(LETOR_LINES)
        return RunConfig(
            dataset=DatasetSpec(kind="letor", letor_path=str(letor)),
            net=NetConfig(layers=1, input_dim=4, hidden_dims=(4,), dense_dims=(3,),
                          window=2, dropout=0.0, learning_rate=0.1, output="sigmoid",
                          input_scale=2.0),
            policy=PolicyConfig(epsilon=0.3, docs_per_iteration=2, iterations=1,
                                selection="sample", seed=0, epoch_cap=3, stop_tol=0.0),
            metric=MetricSpec(target="ndcg", report=("ndcg@2",)),
            feedback="embed-rocchio",  # must fall back in feature mode
            folds=3,
            seed=0,
            out_dir=str(tmp_path / "out"),
        )

    def test_feature_inputs_are_bare_feature_vectors(self, tmp_path):
        from dynrank.policy import forward_inputs, new_session, step_transition

        config = self.make_config(tmp_path)
        ds = load_dataset(config.dataset, config.seed)
        state = new_session(ds, "1")
        assert state.query.size == 0
        doc = sorted(state.candidates)[0]
        state = step_transition(state, doc)
        (unit,) = forward_inputs(state)
        np.testing.assert_array_equal(unit, ds.doc_vector("1", doc))

    def test_train_evaluate_on_letor(self, tmp_path):
        config = self.make_config(tmp_path)
        ds = load_dataset(config.dataset, config.seed)
        train_report = train_run(config, ds)
        assert len(train_report.folds) == 3
        assert any("feature mode" in n for n in train_report.notes)
        eval_report = evaluate_run(config, ds)
        rows = eval_report.tables["evaluation"]
        assert rows and all(0.0 <= mean <= 1.0 for _, _, mean, _ in rows)
