"""Experiment configs, method pipelines, run reports, and the grid."""

import json

import numpy as np
import pytest

from fedsplit.data import SyntheticSpec
from fedsplit.errors import ValidationError
from fedsplit.harness import (
    METHOD_STAGES,
    METHODS,
    ExperimentConfig,
    RunContext,
    grid,
    load_dataset,
    run,
    run_matrix,
)


def tiny_config(method="vfl", seed=0, **kwargs):
    synth = SyntheticSpec(
        n_labeled=800, n_unlabeled=1600, n_test=400, d_a=6, d_b=6,
        rule="xor", positive_rate=0.5, lift=1.0, leak=0.3,
        shared_dim=2, private_dim=1, noise=0.3,
    )
    defaults = dict(
        method=method, seed=seed, synth=synth,
        bottom_a=(8,), bottom_b=(8,), top=(4,),
        lr=1e-2, finetune_lr=5e-3, alpha=0.5, l2=1e-4,
        batch_pretrain=256, batch_train=256, eval_batch=1024,
        epochs=3, pretrain_epochs=2, patience=3,
    )
    defaults.update(kwargs)
    return ExperimentConfig(**defaults)


class TestConfig:
    def test_file_round_trip(self, tmp_path):
        config = tiny_config(method="local-ssd", seed=7, alpha=0.9)
        path = tmp_path / "run.cfg"
        config.to_file(path)
        loaded = ExperimentConfig.from_file(path)
        assert loaded.method == "local-ssd"
        assert loaded.seed == 7
        assert loaded.alpha == 0.9
        assert loaded.synth == config.synth
        assert loaded.config_hash() == config.config_hash()

    def test_flag_overrides(self, tmp_path):
        config = tiny_config()
        path = tmp_path / "run.cfg"
        config.to_file(path)
        loaded = ExperimentConfig.from_file(path, {"hyper.lr": "0.5", "run.seed": "9"})
        assert loaded.lr == 0.5 and loaded.seed == 9

    def test_hash_excludes_execution_details(self):
        a = tiny_config(transport="inproc")
        b = tiny_config(transport="tcp", tcp_port=12345, out_dir="/tmp/x")
        assert a.config_hash() == b.config_hash()

    def test_hash_sees_hyperparameters(self):
        assert tiny_config(lr=1e-2).config_hash() != tiny_config(lr=5e-3).config_hash()

    def test_unknown_method_rejected(self):
        with pytest.raises(ValidationError):
            tiny_config(method="magic").validate()

    def test_unlabeled_requirement_enforced(self):
        bad = tiny_config(
            method="vfl-mpd",
            synth=SyntheticSpec(n_labeled=100, n_unlabeled=0, n_test=50),
        )
        with pytest.raises(ValidationError):
            bad.validate()


class TestRun:
    def test_baseline_local_sends_zero_protocol_messages(self):
        report = run(tiny_config(method="baseline-local"))
        assert report.failed_stage is None
        assert report.messages_sent == {} and report.messages_received == {}
        assert report.inference_messages == 0
        assert report.stages == ["local-train"]
        assert 0.0 <= report.test_auc <= 1.0

    def test_vfl_counts_messages_and_improvement(self):
        report = run(tiny_config(method="vfl"))
        assert report.failed_stage is None
        assert report.messages_sent.get("GRADIENT", 0) > 0
        assert report.messages_received.get("ACTIVATION", 0) > 0
        assert report.inference_messages > 0
        assert report.baseline_auc is not None
        np.testing.assert_allclose(
            report.improvement, report.test_auc - report.baseline_auc, atol=1e-12
        )

    def test_stage_lists_match_method_definitions(self):
        ctx = RunContext()
        config = tiny_config()
        dataset = load_dataset(config)
        for method in METHODS:
            report = run(tiny_config(method=method), context=ctx, dataset=dataset)
            assert report.failed_stage is None, (method, report.error)
            assert report.stages == METHOD_STAGES[method], method

    def test_mpd_pipeline_history_has_no_validation_auc(self):
        # the pretraining stage never sees labels, so it records none
        report = run(tiny_config(method="vfl-mpd"))
        pretrain_history = report.histories["mpd-pretrain"]
        assert all(r.val_auc is None for r in pretrain_history.records)
        assert all("match_accuracy" in r.extra for r in pretrain_history.records)

    def test_local_methods_do_zero_inference_messages(self):
        ctx = RunContext()
        config = tiny_config()
        dataset = load_dataset(config)
        for method in ("local-sd", "local-mpd", "local-ssd"):
            report = run(tiny_config(method=method), context=ctx, dataset=dataset)
            assert report.inference_messages == 0, method

    def test_identical_config_and_seed_reproduce_the_report(self):
        config = tiny_config(method="local-ssd", seed=3)
        first = run(config)
        second = run(config)
        assert first.test_auc == second.test_auc
        assert first.baseline_auc == second.baseline_auc
        assert first.messages_sent == second.messages_sent
        assert first.bytes_sent == second.bytes_sent
        for stage in first.histories:
            a = first.histories[stage]
            b = second.histories[stage]
            assert [r.train_loss for r in a.records] == [r.train_loss for r in b.records]
            assert [r.val_auc for r in a.records] == [r.val_auc for r in b.records]

    def test_report_json_is_parseable(self):
        report = run(tiny_config(method="vfl"))
        payload = json.loads(report.to_json())
        assert payload["method"] == "vfl"
        assert payload["histories"]["fed-train"]

    def test_failed_run_reports_stage(self):
        # batch size 1 passes config validation but the training stage
        # rejects it (pair batches cannot be permuted)
        report = run(tiny_config(method="vfl", batch_train=1))
        assert report.failed_stage == "fed-train"
        assert report.error is not None
        assert report.test_auc is None

    def test_artifacts_written(self, tmp_path):
        config = tiny_config(method="vfl", out_dir=str(tmp_path))
        report = run(config)
        run_dir = tmp_path / "runs" / config.config_hash()
        assert (run_dir / "resolved.cfg").exists()
        assert (run_dir / "report.json").exists()
        assert (run_dir / "fed-train" / "metrics.jsonl").exists()
        assert (run_dir / "final.ckpt").exists()
        assert (run_dir / "vfl" / "party_a.ckpt").exists()
        assert (run_dir / "party_b_vfl.ckpt").exists()


class TestRunMatrix:
    def test_shares_pretraining_across_methods(self):
        config = tiny_config()
        results = run_matrix(config, methods=("vfl-mpd", "local-mpd", "local-ssd"),
                             seeds=(0,))
        for method, by_seed in results.items():
            assert by_seed[0].failed_stage is None, method
        histories = [results[m][0].histories["mpd-pretrain"] for m in results]
        losses = [[r.train_loss for r in h.records] for h in histories]
        assert losses[0] == losses[1] == losses[2]

    def test_improvements_are_against_same_seed_baseline(self):
        config = tiny_config()
        results = run_matrix(config, methods=("baseline-local", "vfl"), seeds=(0, 1))
        for seed in (0, 1):
            base = results["baseline-local"][seed]
            fed = results["vfl"][seed]
            np.testing.assert_allclose(
                fed.improvement, fed.test_auc - base.test_auc, atol=1e-12
            )
            assert fed.baseline_auc == base.test_auc


class TestGrid:
    def test_grid_of_size_one_equals_repeated_runs(self):
        config = tiny_config(method="baseline-local")
        result = grid(config, {"lr": [1e-2]}, seeds=(0, 1, 2))
        assert len(result.table) == 3
        for entry, seed in zip(result.table, (0, 1, 2)):
            single = run(tiny_config(method="baseline-local", seed=seed, lr=1e-2))
            assert entry["test_auc"] == single.test_auc

    def test_selection_uses_validation_never_test(self):
        config = tiny_config(method="baseline-local")
        result = grid(config, {"lr": [1e-2, 5e-3]}, seeds=(0,))
        assert len(result.table) == 2
        picked = max(result.table, key=lambda e: e["val_auc"])
        assert result.best_val_auc == picked["val_auc"]
        assert result.best.test_auc == picked["test_auc"]

    def test_paper_style_grid_enumerates_all_combinations(self):
        config = tiny_config(method="baseline-local", epochs=1)
        result = grid(config, {"lr": [1e-2, 5e-3], "l2": [1e-4, 1e-5]}, seeds=(0,))
        assert len(result.table) == 4
        combos = {(e["combo"]["lr"], e["combo"]["l2"]) for e in result.table}
        assert len(combos) == 4
