"""Running the two parties as two OS processes over TCP.

The passive party runs `fedsplit serve-b`; the active party connects,
handshakes (schema + config hashes must agree), trains, and both sides
write their checkpoint halves. The transport is semantically invisible:
the same seed over the in-process channel yields bit-identical parameters.

Run with: python demos/07_two_process_tcp.py
"""

import json
import socket
import subprocess
import sys
import time
from pathlib import Path
from tempfile import TemporaryDirectory

SETS = [
    "--set", "data.n_labeled=2000", "--set", "data.n_unlabeled=4000",
    "--set", "data.n_test=1000", "--set", "data.d_a=6", "--set", "data.d_b=6",
    "--set", "data.buckets=12", "--set", "data.leak=0.35",
    "--set", "data.shared_dim=0", "--set", "data.private_dim=1",
    "--set", "data.noise=0.4",
    "--set", "arch.bottom_a=16", "--set", "arch.bottom_b=16", "--set", "arch.top=8",
    "--set", "hyper.epochs=4", "--set", "hyper.pretrain_epochs=2",
    "--set", "hyper.batch_train=256", "--set", "hyper.batch_pretrain=512",
    "--set", "hyper.l2=1e-5",
]

with socket.socket() as probe:
    probe.bind(("127.0.0.1", 0))
    port = probe.getsockname()[1]

with TemporaryDirectory() as tmp_b, TemporaryDirectory() as tmp_a, TemporaryDirectory() as tmp_in:
    print(f"starting passive party on 127.0.0.1:{port} ...")
    # the hello exchange verifies schema and config hashes, so the passive
    # party must be launched with the same method and hyperparameters
    server = subprocess.Popen(
        [sys.executable, "-m", "fedsplit", "serve-b", "--port", str(port),
         "--method", "vfl-mpd", "--out", tmp_b, *SETS],
        stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True,
    )
    time.sleep(1.0)

    print("running vfl-mpd over TCP (pretrain + fine-tune in one session) ...")
    proc = subprocess.run(
        [sys.executable, "-m", "fedsplit", "run", "--method", "vfl-mpd",
         "--transport", "tcp", "--set", f"exec.tcp_port={port}",
         "--out", tmp_a, *SETS],
        capture_output=True, text=True,
    )
    server.wait(timeout=120)
    report = json.loads(proc.stdout)
    print(f"TCP run: test AUC {report['test_auc']:.4f}, "
          f"messages sent {report['messages_sent']}")

    print("running the same config in-process ...")
    proc2 = subprocess.run(
        [sys.executable, "-m", "fedsplit", "run", "--method", "vfl-mpd",
         "--out", tmp_in, *SETS],
        capture_output=True, text=True,
    )
    report2 = json.loads(proc2.stdout)
    print(f"in-process run: test AUC {report2['test_auc']:.4f}")

    a_tcp = next(Path(tmp_a).glob("runs/*/vfl-mpd-ft/party_a.ckpt")).read_bytes()
    a_in = next(Path(tmp_in).glob("runs/*/vfl-mpd-ft/party_a.ckpt")).read_bytes()
    b_tcp = next(Path(tmp_b).glob("runs/*/party_b_vfl-mpd-ft.ckpt")).read_bytes()
    b_in = next(Path(tmp_in).glob("runs/*/party_b_vfl-mpd-ft.ckpt")).read_bytes()
    print("party A checkpoints identical across transports:", a_tcp == a_in)
    print("party B checkpoints identical across transports:", b_tcp == b_in)
