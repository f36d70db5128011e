"""Command-line surface: synth, run, eval, pretrain, serve-b."""

import json
import socket
import subprocess
import sys
import time
from pathlib import Path

import pytest

BASE_SETS = [
    "--set", "data.n_labeled=600",
    "--set", "data.n_unlabeled=1200",
    "--set", "data.n_test=300",
    "--set", "data.d_a=5",
    "--set", "data.d_b=5",
    "--set", "data.leak=0.3",
    "--set", "data.noise=0.3",
    "--set", "arch.bottom_a=8",
    "--set", "arch.bottom_b=8",
    "--set", "arch.top=4",
    "--set", "hyper.epochs=2",
    "--set", "hyper.pretrain_epochs=1",
    "--set", "hyper.batch_train=256",
    "--set", "hyper.batch_pretrain=256",
]


def cli(*args, timeout=300):
    return subprocess.run(
        [sys.executable, "-m", "fedsplit", *args],
        capture_output=True, text=True, timeout=timeout,
    )


def free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


class TestSynthCommand:
    def test_writes_csv_pairs_and_schemas(self, tmp_path):
        proc = cli("synth", "--out", str(tmp_path), *BASE_SETS)
        assert proc.returncode == 0, proc.stderr
        for name in ("schema_a.txt", "schema_b.txt", "labeled_a.csv", "labeled_b.csv",
                     "unlabeled_a.csv", "unlabeled_b.csv", "test_a.csv", "test_b.csv"):
            assert (tmp_path / name).exists(), name
        header = (tmp_path / "labeled_a.csv").read_text().splitlines()[0]
        assert header.endswith(",label")
        b_header = (tmp_path / "labeled_b.csv").read_text().splitlines()[0]
        assert "label" not in b_header

    def test_csv_round_trip_through_run(self, tmp_path):
        assert cli("synth", "--out", str(tmp_path), *BASE_SETS).returncode == 0
        proc = cli(
            "run", "--method", "baseline-local",
            "--set", "data.kind=csv",
            "--set", f"data.csv_labeled_a={tmp_path}/labeled_a.csv",
            "--set", f"data.csv_labeled_b={tmp_path}/labeled_b.csv",
            "--set", f"data.csv_test_a={tmp_path}/test_a.csv",
            "--set", f"data.csv_test_b={tmp_path}/test_b.csv",
            "--set", f"data.csv_schema_a={tmp_path}/schema_a.txt",
            "--set", f"data.csv_schema_b={tmp_path}/schema_b.txt",
            "--set", "arch.bottom_a=8", "--set", "arch.bottom_b=8", "--set", "arch.top=4",
            "--set", "hyper.epochs=2", "--set", "hyper.batch_train=256",
        )
        assert proc.returncode == 0, proc.stderr
        report = json.loads(proc.stdout)
        assert 0.0 <= report["test_auc"] <= 1.0


class TestRunCommand:
    def test_run_emits_report_json(self):
        proc = cli("run", "--method", "vfl", "--seed", "1", *BASE_SETS)
        assert proc.returncode == 0, proc.stderr
        report = json.loads(proc.stdout)
        assert report["method"] == "vfl"
        assert report["stages"] == ["fed-train"]
        assert report["messages_sent"]["GRADIENT"] > 0

    def test_train_rejects_pipeline_methods(self):
        proc = cli("train", "--method", "local-ssd", *BASE_SETS)
        assert proc.returncode != 0

    def test_pretrain_reports_match_metrics(self, tmp_path):
        proc = cli("pretrain", "--out", str(tmp_path), *BASE_SETS)
        assert proc.returncode == 0, proc.stderr
        payload = json.loads(proc.stdout)
        assert 0.0 <= payload["match_accuracy"] <= 1.0
        run_dirs = list((tmp_path / "runs").iterdir())
        assert run_dirs
        assert (run_dirs[0] / "pretrained_bottom_a.ckpt").exists()
        assert (run_dirs[0] / "party_b_pretrained.ckpt").exists()

    def test_eval_scores_a_checkpoint(self, tmp_path):
        proc = cli("run", "--method", "baseline-local", "--out", str(tmp_path), *BASE_SETS)
        assert proc.returncode == 0, proc.stderr
        ckpt = next((tmp_path / "runs").glob("*/final.ckpt"))
        proc = cli("eval", "--checkpoint", str(ckpt), *BASE_SETS)
        assert proc.returncode == 0, proc.stderr
        payload = json.loads(proc.stdout)
        assert 0.0 <= payload["test_auc"] <= 1.0


class TestServeB:
    def test_handshake_mismatch_exits_nonzero(self):
        port = free_port()
        server = subprocess.Popen(
            [sys.executable, "-m", "fedsplit", "serve-b", "--port", str(port),
             "--set", "exec.recv_timeout=20", *BASE_SETS],
            stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True,
        )
        try:
            time.sleep(1.0)
            # the client disagrees on a hyperparameter, so config hashes differ
            proc = cli("run", "--method", "vfl", "--transport", "tcp",
                       "--set", f"exec.tcp_port={port}",
                       "--set", "hyper.lr=0.5", *BASE_SETS)
            out = json.loads(proc.stdout)
            assert out["failed_stage"] is not None
            server.wait(timeout=30)
            assert server.returncode != 0
        finally:
            if server.poll() is None:
                server.kill()
                server.wait()

    def test_killing_party_b_mid_run_aborts_with_transport_error(self, tmp_path):
        port = free_port()
        # big enough to keep training busy for several seconds
        sets = BASE_SETS + [
            "--set", "data.n_labeled=20000", "--set", "hyper.epochs=300",
            "--set", "hyper.patience=300",
        ]
        server = subprocess.Popen(
            [sys.executable, "-m", "fedsplit", "serve-b", "--port", str(port),
             "--set", "exec.recv_timeout=60", *sets],
            stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True,
        )
        try:
            time.sleep(1.0)
            client = subprocess.Popen(
                [sys.executable, "-m", "fedsplit", "run", "--method", "vfl",
                 "--transport", "tcp", "--set", f"exec.tcp_port={port}",
                 "--set", "exec.recv_timeout=5", "--out", str(tmp_path), *sets],
                stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True,
            )
            time.sleep(4.0)  # well inside training
            server.kill()
            server.wait()
            out, _ = client.communicate(timeout=120)
            assert client.returncode != 0
            report = json.loads(out)
            assert report["failed_stage"] == "fed-train"
            assert "Transport" in report["error"] or "recv" in report["error"]
        finally:
            if server.poll() is None:
                server.kill()
                server.wait()

    def test_two_process_vfl_run_completes(self, tmp_path):
        port = free_port()
        server = subprocess.Popen(
            [sys.executable, "-m", "fedsplit", "serve-b", "--port", str(port),
             "--set", "exec.recv_timeout=60", *BASE_SETS],
            stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True,
        )
        try:
            time.sleep(1.0)
            proc = cli("run", "--method", "vfl", "--transport", "tcp",
                       "--set", f"exec.tcp_port={port}",
                       "--set", "exec.recv_timeout=60",
                       "--out", str(tmp_path), *BASE_SETS)
            assert proc.returncode == 0, proc.stderr + proc.stdout
            report = json.loads(proc.stdout)
            assert report["failed_stage"] is None
            assert 0.0 <= report["test_auc"] <= 1.0
            server.wait(timeout=60)
            assert server.returncode == 0, server.stderr.read()
        finally:
            if server.poll() is None:
                server.kill()
                server.wait()
