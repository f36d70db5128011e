"""Two-party split training.

The passive party (B) computes its hidden block h_B and ships it; the
active party (A) fuses h_B with its own hidden block, scores, computes the
loss, and returns the gradient at h_B. Each training batch therefore costs
exactly two matrix messages:

    B -> A   Activation      h_B, float32 (m, d_B)
    A -> B   Gradient        dLoss/dh_B, same shape

An inference-only batch sends a single EvalActivation and nothing back.
Control frames carry phase/epoch bookkeeping between epochs; they never
contain labels, loss values, or top-model parameters, and the passive
runtime holds neither labels nor the top model by construction.

Both parties derive identical batch schedules from shared integer seed keys
(sent in Control metadata), so no index lists ever cross the wire. The
active party drives; the passive party is a message-driven state machine
(`PassiveParty.serve`) that behaves identically over the in-process and TCP
transports.
"""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass
from typing import Callable, Mapping

import numpy as np

from . import checkpoint as ckpt
from .data import FeatureBlock, PartitionedDataset, PartySchema, batch_indices, validation_split
from .errors import ProtocolError, ShapeError, StateError, ValidationError
from .metrics import EpochRecord, MetricHistory, early_stop
from .numeric import (
    F32,
    RELU,
    AdamState,
    EmbeddingTable,
    Mlp,
    adam_step,
    bce_loss,
    sigmoid,
)
from .transport import Channel, MsgType

# Sub-stream ids for seed derivation; every random draw in a run comes from
# default_rng([seed, stream, ...]) with one of these streams.
STREAM_INIT_BOTTOM_A = 21
STREAM_INIT_BOTTOM_B = 22
STREAM_INIT_TOP = 23
STREAM_INIT_LOCAL_A = 24
STREAM_INIT_LOCAL_B = 25
STREAM_INIT_MPD_TOP = 26
STREAM_SHUFFLE = 31
STREAM_SPLIT = 32
STREAM_DERANGE = 33

# Stage tags keep shuffle streams of different pipeline stages apart. The
# local stage is shared by baseline training and distillation on purpose:
# with alpha = 1 the two must replay the identical trajectory.
STAGE_IDS = {"fed": 1, "local": 2, "mpd": 3, "soft": 4}


def rng_for(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng([seed, *key])


def split_key(seed: int) -> list[int]:
    return [seed, STREAM_SPLIT]


def shuffle_key(seed: int, stage: str, epoch: int) -> list[int]:
    return [seed, STREAM_SHUFFLE, STAGE_IDS[stage], epoch]


def schema_pair_hash(schema_a: PartySchema, schema_b: PartySchema) -> str:
    text = schema_a.canonical_text() + schema_b.canonical_text()
    return hashlib.sha256(text.encode("utf-8")).hexdigest()[:16]


def copy_params(params: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    return {k: v.copy() for k, v in params.items()}


@dataclass
class TrainSettings:
    """Hyperparameters of one training stage."""

    lr: float = 1e-2
    l2: float = 1e-4
    batch_size: int = 512
    epochs: int = 30
    patience: int | None = 3
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    eval_batch_size: int = 8192
    stage: str = "fed"

    def adam(self) -> AdamState:
        return AdamState(
            lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.adam_eps, l2=self.l2
        )


# ---------------------------------------------------------------------------
# Model containers
# ---------------------------------------------------------------------------


class BottomModel:
    """Per-party feature encoder: hashed embeddings feeding a dense stack."""

    def __init__(self, schema: PartySchema, embeddings: dict[str, EmbeddingTable], mlp: Mlp):
        self.schema = schema
        self.embeddings = embeddings
        self.mlp = mlp
        self._layout = self._build_layout()

    @classmethod
    def create(
        cls,
        schema: PartySchema,
        widths,
        rng: np.random.Generator,
        *,
        final_activation: str = RELU,
    ) -> "BottomModel":
        embeddings = {
            f.name: EmbeddingTable.create(f.buckets, f.embed_dim, rng)
            for f in schema.cat_fields
        }
        mlp = Mlp.create(schema.post_embed_dim, widths, rng, final_activation=final_activation)
        return cls(schema, embeddings, mlp)

    def _build_layout(self):
        layout = []
        col = 0
        cat_j = 0
        num_j = 0
        for f in self.schema.fields:
            if f.kind == "categorical":
                layout.append(("cat", f.name, cat_j, col, col + f.embed_dim))
                col += f.embed_dim
                cat_j += 1
            else:
                layout.append(("num", f.name, num_j, col, col + 1))
                col += 1
                num_j += 1
        return layout

    @property
    def out_dim(self) -> int:
        return self.mlp.out_dim

    def embed(self, block: FeatureBlock) -> np.ndarray:
        pieces = []
        for kind, name, j, _, _ in self._layout:
            if kind == "cat":
                pieces.append(self.embeddings[name].lookup(block.cat[:, j]))
            else:
                pieces.append(block.num[:, j : j + 1])
        return np.concatenate(pieces, axis=1) if pieces else np.zeros((block.n_rows, 0), F32)

    def forward(self, block: FeatureBlock):
        x0 = self.embed(block)
        h, caches = self.mlp.forward(x0)
        return h, (block, caches)

    def backward(self, cache, grad_h: np.ndarray) -> dict[str, np.ndarray]:
        if cache is None:
            raise StateError("backward called with no recorded forward")
        block, caches = cache
        grad_x0, mlp_grads = self.mlp.backward(caches, grad_h)
        grads = {f"mlp.{k}": v for k, v in mlp_grads.items()}
        for kind, name, j, start, end in self._layout:
            if kind == "cat":
                grads[f"emb.{name}"] = self.embeddings[name].grad(
                    block.cat[:, j], grad_x0[:, start:end]
                )
        return grads

    def params(self) -> dict[str, np.ndarray]:
        out = {f"emb.{name}": table.table for name, table in self.embeddings.items()}
        out.update({f"mlp.{k}": v for k, v in self.mlp.params().items()})
        return out

    def set_params(self, mapping: Mapping[str, np.ndarray]) -> None:
        mlp_map = {}
        for key, value in mapping.items():
            if key.startswith("emb."):
                name = key[4:]
                table = self.embeddings[name].table
                self.embeddings[name].table = value.reshape(table.shape)
            elif key.startswith("mlp."):
                mlp_map[key[4:]] = value
            else:
                raise ValidationError(f"unknown bottom parameter '{key}'")
        if mlp_map:
            current = self.mlp.params()
            self.mlp.set_params(
                {k: v.reshape(current[k].shape) for k, v in mlp_map.items()}
            )

    def decay_full(self) -> set[str]:
        return {f"mlp.{name}" for name in self.mlp.weight_names()}

    def touched_rows(self, cache) -> dict[str, np.ndarray]:
        """Embedding rows gathered by this batch (the only rows L2 touches)."""
        block, _ = cache
        return {
            f"emb.{name}": np.unique(block.cat[:, j])
            for kind, name, j, _, _ in self._layout
            if kind == "cat"
        }


class TopModel:
    """Active-party head: dense stack ending in a single logit."""

    def __init__(self, mlp: Mlp):
        if mlp.out_dim != 1:
            raise ShapeError("top model must end in a single logit")
        self.mlp = mlp

    @classmethod
    def create(cls, n_in: int, hidden_widths, rng: np.random.Generator) -> "TopModel":
        widths = [*hidden_widths, 1]
        return cls(Mlp.create(n_in, widths, rng, final_activation="identity"))

    @property
    def n_in(self) -> int:
        return self.mlp.n_in

    def forward(self, h: np.ndarray):
        out, caches = self.mlp.forward(h)
        return out[:, 0], caches

    def backward(self, caches, grad_logits: np.ndarray):
        grad_h, grads = self.mlp.backward(caches, np.asarray(grad_logits).reshape(-1, 1))
        return grad_h, grads

    def params(self) -> dict[str, np.ndarray]:
        return self.mlp.params()

    def set_params(self, mapping: Mapping[str, np.ndarray]) -> None:
        current = self.mlp.params()
        self.mlp.set_params({k: v.reshape(current[k].shape) for k, v in mapping.items()})

    def decay_full(self) -> set[str]:
        return self.mlp.weight_names()


def _prefix(params: Mapping[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    return {f"{prefix}.{k}": v for k, v in params.items()}


def _strip(mapping: Mapping[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    start = prefix + "."
    return {k[len(start):]: v for k, v in mapping.items() if k.startswith(start)}


class LocalModel:
    """Single-party model: one bottom plus a private top."""

    def __init__(self, bottom: BottomModel, top: TopModel):
        if top.n_in != bottom.out_dim:
            raise ShapeError(
                f"top expects {top.n_in} inputs, bottom produces {bottom.out_dim}"
            )
        self.bottom = bottom
        self.top = top

    @classmethod
    def create(cls, schema, bottom_widths, top_widths, rng) -> "LocalModel":
        bottom = BottomModel.create(schema, bottom_widths, rng)
        top = TopModel.create(bottom.out_dim, top_widths, rng)
        return cls(bottom, top)

    def forward(self, block: FeatureBlock):
        h, cache_b = self.bottom.forward(block)
        logits, cache_t = self.top.forward(h)
        return logits, (cache_b, cache_t)

    def backward(self, cache, grad_logits: np.ndarray) -> dict[str, np.ndarray]:
        cache_b, cache_t = cache
        grad_h, grads_top = self.top.backward(cache_t, grad_logits)
        grads_bottom = self.bottom.backward(cache_b, grad_h)
        return {**_prefix(grads_top, "top"), **_prefix(grads_bottom, "bottom")}

    def predict_logits(self, block: FeatureBlock) -> np.ndarray:
        logits, _ = self.forward(block)
        return logits

    def params(self) -> dict[str, np.ndarray]:
        return {**_prefix(self.bottom.params(), "bottom"), **_prefix(self.top.params(), "top")}

    def set_params(self, mapping: Mapping[str, np.ndarray]) -> None:
        bottom_map = _strip(mapping, "bottom")
        top_map = _strip(mapping, "top")
        if bottom_map:
            self.bottom.set_params(bottom_map)
        if top_map:
            self.top.set_params(top_map)

    def decay_full(self) -> set[str]:
        return {f"bottom.{n}" for n in self.bottom.decay_full()} | {
            f"top.{n}" for n in self.top.decay_full()
        }

    def touched_rows(self, cache) -> dict[str, np.ndarray]:
        cache_b, _ = cache
        return {f"bottom.{k}": v for k, v in self.bottom.touched_rows(cache_b).items()}


class SplitModel:
    """The federated triple (f_A, f_B, g_A), resident in one process.

    The protocol path lives in the party runtimes; this container exists for
    monolithic evaluation (oracles, diagnostics, teacher snapshots)."""

    def __init__(self, bottom_a: BottomModel, bottom_b: BottomModel, top: TopModel):
        if top.n_in != bottom_a.out_dim + bottom_b.out_dim:
            raise ShapeError(
                f"top expects {top.n_in} inputs, bottoms produce "
                f"{bottom_a.out_dim}+{bottom_b.out_dim}"
            )
        self.bottom_a = bottom_a
        self.bottom_b = bottom_b
        self.top = top

    @classmethod
    def create(cls, schema_a, schema_b, bottom_widths_a, bottom_widths_b, top_widths, seed):
        bottom_a = BottomModel.create(schema_a, bottom_widths_a, rng_for(seed, STREAM_INIT_BOTTOM_A))
        bottom_b = BottomModel.create(schema_b, bottom_widths_b, rng_for(seed, STREAM_INIT_BOTTOM_B))
        top = TopModel.create(
            bottom_a.out_dim + bottom_b.out_dim, top_widths, rng_for(seed, STREAM_INIT_TOP)
        )
        return cls(bottom_a, bottom_b, top)

    def predict_logits(self, block_a: FeatureBlock, block_b: FeatureBlock) -> np.ndarray:
        h_a, _ = self.bottom_a.forward(block_a)
        h_b, _ = self.bottom_b.forward(block_b)
        logits, _ = self.top.forward(np.hstack([h_a, h_b]))
        return logits

    def params(self) -> dict[str, np.ndarray]:
        return {
            **_prefix(self.bottom_a.params(), "a"),
            **_prefix(self.bottom_b.params(), "b"),
            **_prefix(self.top.params(), "top"),
        }

    def set_params(self, mapping: Mapping[str, np.ndarray]) -> None:
        a_map = _strip(mapping, "a")
        b_map = _strip(mapping, "b")
        top_map = _strip(mapping, "top")
        if a_map:
            self.bottom_a.set_params(a_map)
        if b_map:
            self.bottom_b.set_params(b_map)
        if top_map:
            self.top.set_params(top_map)


# ---------------------------------------------------------------------------
# Party runtimes
# ---------------------------------------------------------------------------


class ActiveParty:
    """Label-holding party: bottom f_A, top g_A, and the training driver."""

    role = "active"

    def __init__(self, channel: Channel, bottom: BottomModel, top: TopModel,
                 dataset: PartitionedDataset | None = None):
        self.channel = channel
        self.bottom = bottom
        self.top = top
        self.dataset = dataset
        self.optimizer: AdamState | None = None
        self._ctx = None
        self._touched: dict[str, np.ndarray] = {}

    # -- single-step protocol operations ------------------------------------
    def forward_step(self, block_a: FeatureBlock) -> np.ndarray:
        """Consume one Activation and produce the fused logits."""
        msg = self.channel.expect(MsgType.ACTIVATION)
        h_b = msg.payload
        if h_b.shape[0] != block_a.n_rows:
            raise ProtocolError(
                f"activation carries {h_b.shape[0]} rows for a {block_a.n_rows}-row batch"
            )
        h_a, cache_a = self.bottom.forward(block_a)
        if h_a.shape[1] + h_b.shape[1] != self.top.n_in:
            raise ProtocolError(
                f"width mismatch: top expects {self.top.n_in}, "
                f"got {h_a.shape[1]}+{h_b.shape[1]}"
            )
        fused = np.hstack([h_a, h_b])
        logits, cache_t = self.top.forward(fused)
        self._ctx = (cache_a, cache_t, h_a.shape[1])
        return logits

    def backward_step(self, grad_logits: np.ndarray) -> dict[str, np.ndarray]:
        """Send the h_B gradient, return this party's parameter gradients."""
        if self._ctx is None:
            raise StateError("backward_step without a completed forward_step")
        cache_a, cache_t, d_a = self._ctx
        grad_fused, grads_top = self.top.backward(cache_t, grad_logits)
        grad_h_b = np.ascontiguousarray(grad_fused[:, d_a:], dtype=F32)
        self.channel.send_new(MsgType.GRADIENT, payload=grad_h_b)
        grads_bottom = self.bottom.backward(cache_a, grad_fused[:, :d_a])
        self._touched = {
            f"bottom.{k}": v for k, v in self.bottom.touched_rows(cache_a).items()
        }
        self._ctx = None
        return {**_prefix(grads_top, "top"), **_prefix(grads_bottom, "bottom")}

    def eval_step(self, block_a: FeatureBlock) -> np.ndarray:
        """Consume one EvalActivation; no gradient follows."""
        msg = self.channel.expect(MsgType.EVAL_ACTIVATION)
        h_b = msg.payload
        if h_b.shape[0] != block_a.n_rows:
            raise ProtocolError("eval activation row count mismatch")
        h_a, _ = self.bottom.forward(block_a)
        logits, _ = self.top.forward(np.hstack([h_a, h_b]))
        return logits

    def apply_update(self, grads: Mapping[str, np.ndarray]) -> None:
        if self.optimizer is None:
            raise StateError("no optimizer configured (send a phase first)")
        params = {**_prefix(self.top.params(), "top"), **_prefix(self.bottom.params(), "bottom")}
        decay_full = {f"top.{n}" for n in self.top.decay_full()} | {
            f"bottom.{n}" for n in self.bottom.decay_full()
        }
        adam_step(self.optimizer, params, grads, decay_full=decay_full,
                  decay_rows=self._touched)

    # -- phase / snapshot plumbing -------------------------------------------
    def start_phase(self, settings: TrainSettings, name: str) -> None:
        self.optimizer = settings.adam()
        self.channel.send_new(
            MsgType.CONTROL,
            meta={
                "cmd": "phase",
                "name": name,
                "lr": repr(settings.lr),
                "l2": repr(settings.l2),
                "beta1": repr(settings.beta1),
                "beta2": repr(settings.beta2),
                "adam_eps": repr(settings.adam_eps),
            },
        )

    def my_params(self) -> dict[str, np.ndarray]:
        return {**_prefix(self.bottom.params(), "bottom"), **_prefix(self.top.params(), "top")}

    def set_my_params(self, mapping) -> None:
        self.bottom.set_params(_strip(mapping, "bottom"))
        self.top.set_params(_strip(mapping, "top"))


class PassiveParty:
    """Feature-only party: bottom f_B and a message-driven serve loop.

    Holds no labels and no top model; the only state it mutates in response
    to the active party is its own bottom and optimizer.
    """

    role = "passive"

    def __init__(self, channel: Channel, bottom: BottomModel,
                 blocks: dict[str, FeatureBlock], *, save_dir=None):
        self.channel = channel
        self.bottom = bottom
        self.blocks = blocks
        self.save_dir = save_dir
        self.optimizer: AdamState | None = None
        self._ctx = None
        self._sent_shape = None
        self._touched: dict[str, np.ndarray] = {}
        self._best: dict[str, np.ndarray] | None = None
        self.schema_hash = ""

    # -- single-step protocol operations ------------------------------------
    def send_activation(self, block_b: FeatureBlock, *, for_eval: bool = False) -> np.ndarray:
        h, cache = self.bottom.forward(block_b)
        payload = np.ascontiguousarray(h, dtype=F32)
        self.channel.send_new(
            MsgType.EVAL_ACTIVATION if for_eval else MsgType.ACTIVATION, payload=payload
        )
        if not for_eval:
            self._ctx = cache
            self._sent_shape = payload.shape
            self._touched = self.bottom.touched_rows(cache)
        return h

    def recv_gradient(self) -> dict[str, np.ndarray]:
        if self._ctx is None:
            raise StateError("recv_gradient without a pending activation")
        msg = self.channel.expect(MsgType.GRADIENT)
        if msg.payload.shape != self._sent_shape:
            raise ProtocolError(
                f"gradient shape {msg.payload.shape} != activation shape {self._sent_shape}"
            )
        grads = self.bottom.backward(self._ctx, msg.payload)
        self._ctx = None
        return grads

    def apply_update(self, grads: Mapping[str, np.ndarray]) -> None:
        if self.optimizer is None:
            raise StateError("no optimizer configured (phase not started)")
        adam_step(
            self.optimizer,
            self.bottom.params(),
            grads,
            decay_full=self.bottom.decay_full(),
            decay_rows=self._touched,
        )

    # -- command handlers ----------------------------------------------------
    def _rows_for(self, meta: dict) -> tuple[FeatureBlock, np.ndarray]:
        block = self.blocks[meta["segment"]]
        subset = meta.get("subset", "all")
        if subset == "all":
            rows = np.arange(block.n_rows)
        else:
            train_idx, val_idx = validation_split(block.n_rows, [int(meta["split_seed"]), STREAM_SPLIT])
            rows = train_idx if subset == "train" else val_idx
        return block, rows

    def _handle_epoch(self, meta: dict) -> None:
        block, rows = self._rows_for(meta)
        skey = [int(x) for x in meta["shuffle"].split(",")]
        for pos in batch_indices(
            len(rows),
            int(meta["batch_size"]),
            skey,
            drop_short=meta.get("drop_short", "0") == "1",
        ):
            self.send_activation(block.take(rows[pos]))
            self.apply_update(self.recv_gradient())

    def _handle_eval(self, meta: dict) -> None:
        block, rows = self._rows_for(meta)
        for pos in batch_indices(
            len(rows), int(meta["batch_size"]), None, shuffle=False
        ):
            self.send_activation(block.take(rows[pos]), for_eval=True)

    def _handle_phase(self, meta: dict) -> None:
        self.optimizer = AdamState(
            lr=float(meta["lr"]),
            beta1=float(meta["beta1"]),
            beta2=float(meta["beta2"]),
            eps=float(meta["adam_eps"]),
            l2=float(meta["l2"]),
        )

    def _handle_reinit(self, meta: dict) -> None:
        widths = [layer.n_out for layer in self.bottom.mlp.layers]
        final_act = self.bottom.mlp.layers[-1].activation
        rng = np.random.default_rng([int(x) for x in meta["rng_key"].split(",")])
        self.bottom = BottomModel.create(
            self.bottom.schema, widths, rng, final_activation=final_act
        )
        self._best = None

    def serve(self) -> None:
        """Process commands until Bye. Raises on protocol violations."""
        while True:
            msg = self.channel.recv()
            if msg.msg_type == MsgType.BYE:
                return
            if msg.msg_type != MsgType.CONTROL:
                raise ProtocolError(f"unexpected {msg.msg_type.name} outside a batch")
            cmd = msg.meta.get("cmd", "")
            if cmd == "phase":
                self._handle_phase(msg.meta)
            elif cmd == "epoch":
                self._handle_epoch(msg.meta)
            elif cmd == "eval":
                self._handle_eval(msg.meta)
            elif cmd == "epoch-end":
                if msg.meta.get("best") == "1":
                    self._best = copy_params(self.bottom.params())
            elif cmd == "restore-best":
                if self._best is not None:
                    self.bottom.set_params(copy_params(self._best))
            elif cmd == "reinit":
                self._handle_reinit(msg.meta)
            elif cmd == "save":
                if self.save_dir is not None:
                    path = f"{self.save_dir}/party_b_{msg.meta.get('tag', 'final')}.ckpt"
                    ckpt.save_checkpoint(
                        path,
                        _prefix(self.bottom.params(), "b"),
                        self.schema_hash,
                        meta={"role": "passive", **{k: v for k, v in msg.meta.items() if k not in ("cmd",)}},
                    )
            else:
                raise ProtocolError(f"unknown control command '{cmd}'")


# ---------------------------------------------------------------------------
# Single-step module-level operations (in-process party pairs)
# ---------------------------------------------------------------------------


def federated_forward(active: ActiveParty, passive: PassiveParty, batch) -> np.ndarray:
    """One protocol forward pass: exactly one Activation B -> A."""
    passive.send_activation(batch.b)
    return active.forward_step(batch.a)


def federated_backward(
    active: ActiveParty, passive: PassiveParty, grad_logits: np.ndarray
) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """One protocol backward pass: exactly one Gradient A -> B.

    Returns (active grads, passive grads); updates are applied separately
    with apply_update so a transport failure leaves both models untouched.
    """
    grads_a = active.backward_step(grad_logits)
    grads_b = passive.recv_gradient()
    return grads_a, grads_b


# ---------------------------------------------------------------------------
# Active-side drivers
# ---------------------------------------------------------------------------


def _segment_of(dataset: PartitionedDataset | None, name: str):
    if dataset is None:
        raise ValidationError("this party was built without a dataset")
    seg = getattr(dataset, name)
    if seg is None:
        raise ValidationError(f"dataset has no '{name}' segment")
    return seg


def federated_eval_probs(
    active: ActiveParty,
    segment: str,
    *,
    subset: str = "all",
    batch_size: int = 8192,
    seed: int = 0,
) -> np.ndarray:
    """Federated inference over a segment: one EvalActivation per batch."""
    seg = _segment_of(active.dataset, segment)
    if subset == "all":
        rows = np.arange(seg.n_rows)
    else:
        train_idx, val_idx = validation_split(seg.n_rows, [seed, STREAM_SPLIT])
        rows = train_idx if subset == "train" else val_idx
    active.channel.send_new(
        MsgType.CONTROL,
        meta={
            "cmd": "eval",
            "segment": segment,
            "subset": subset,
            "split_seed": str(seed),
            "batch_size": str(batch_size),
        },
    )
    chunks = []
    for pos in batch_indices(len(rows), batch_size, None, shuffle=False):
        logits = active.eval_step(seg.a.take(rows[pos]))
        chunks.append(sigmoid(logits))
    return np.concatenate(chunks) if chunks else np.zeros(0, dtype=F32)


def train_supervised(
    active: ActiveParty,
    settings: TrainSettings,
    *,
    train_segment: str = "labeled",
    train_targets: np.ndarray | None = None,
    phase_name: str = "supervised",
) -> MetricHistory:
    """Federated supervised training with per-epoch validation AUC and early
    stopping; both parties end up holding the best-validation checkpoint.

    train_targets overrides the targets for the training segment (soft
    labels for self-training); validation always scores against the labeled
    segment's hard labels.
    """
    from .metrics import auc as auc_fn

    dataset = active.dataset
    labeled = _segment_of(dataset, "labeled")
    seg = _segment_of(dataset, train_segment)
    if train_targets is None:
        if seg.y is None:
            raise ValidationError(f"segment '{train_segment}' has no labels")
        targets = seg.y
    else:
        if len(train_targets) != seg.n_rows:
            raise ValidationError("train_targets length does not match the segment")
        targets = train_targets

    if train_segment == "labeled":
        train_rows, val_rows = validation_split(labeled.n_rows, split_key(settings.seed))
        subset = "train"
    else:
        train_rows = np.arange(seg.n_rows)
        _, val_rows = validation_split(labeled.n_rows, split_key(settings.seed))
        subset = "all"
    use_val = len(val_rows) > 0 and labeled.y is not None

    active.start_phase(settings, phase_name)
    history = MetricHistory()
    best_auc = -np.inf
    best_params: dict[str, np.ndarray] | None = None

    for epoch in range(1, settings.epochs + 1):
        t0 = time.perf_counter()
        counters = active.channel.counters
        msgs_before = sum(counters.sent.values()) + sum(counters.received.values())
        bytes_before = counters.bytes_sent + counters.bytes_received
        skey = shuffle_key(settings.seed, settings.stage, epoch)
        active.channel.send_new(
            MsgType.CONTROL,
            meta={
                "cmd": "epoch",
                "segment": train_segment,
                "subset": subset,
                "split_seed": str(settings.seed),
                "shuffle": ",".join(str(k) for k in skey),
                "batch_size": str(settings.batch_size),
                "drop_short": "0",
            },
        )
        loss_sum = 0.0
        n_seen = 0
        diverged = False
        for pos in batch_indices(len(train_rows), settings.batch_size, skey):
            rows = train_rows[pos]
            logits = active.forward_step(seg.a.take(rows))
            loss, grad = bce_loss(logits, targets[rows])
            if not np.isfinite(loss):
                # keep lockstep with the waiting passive party; the run ends
                # after this epoch and restores the last good checkpoint
                diverged = True
            if diverged:
                active.backward_step(np.zeros_like(grad))
                continue
            grads = active.backward_step(grad)
            active.apply_update(grads)
            loss_sum += loss * len(rows)
            n_seen += len(rows)

        val_auc = None
        if use_val and not diverged:
            probs = federated_eval_probs(
                active, "labeled", subset="val",
                batch_size=settings.eval_batch_size, seed=settings.seed,
            )
            val_auc = auc_fn(probs, labeled.y[val_rows]).auc

        is_best = val_auc is not None and val_auc > best_auc + 1e-5
        if is_best:
            best_auc = val_auc
            best_params = copy_params(active.my_params())
        active.channel.send_new(
            MsgType.CONTROL, meta={"cmd": "epoch-end", "best": "1" if is_best else "0"}
        )
        msgs_after = sum(counters.sent.values()) + sum(counters.received.values())
        history.append(
            EpochRecord(
                epoch=epoch,
                train_loss=loss_sum / max(n_seen, 1),
                val_auc=val_auc,
                wall_time=time.perf_counter() - t0,
                messages_sent=msgs_after - msgs_before,
                bytes_sent=counters.bytes_sent + counters.bytes_received - bytes_before,
                extra={"diverged": True} if diverged else {},
            )
        )
        if diverged:
            break
        if use_val and settings.patience is not None:
            stop, _ = early_stop(history.val_aucs, settings.patience)
            if stop:
                break

    if best_params is not None:
        active.set_my_params(best_params)
        active.channel.send_new(MsgType.CONTROL, meta={"cmd": "restore-best"})
    return history


def local_train(
    model: LocalModel,
    block: FeatureBlock,
    y: np.ndarray,
    settings: TrainSettings,
    *,
    loss_fn: Callable | None = None,
    train_rows: np.ndarray | None = None,
    val_data: tuple | None = None,
) -> MetricHistory:
    """Single-party training loop, shared by the local baselines and by
    distillation (which plugs in its blended loss via loss_fn).

    loss_fn(logits, rows) must return (loss, dloss/dlogits); the default is
    binary cross-entropy against y. By default validation is a
    deterministic 1/20 split of the provided rows; callers may instead pass
    an explicit training-row pool and (val_block, val_y) pair. Early
    stopping and best-checkpoint restoration match the federated trainer.
    """
    if len(y) != block.n_rows:
        raise ValidationError(f"{len(y)} labels for {block.n_rows} rows")
    if loss_fn is None:
        loss_fn = lambda logits, rows: bce_loss(logits, y[rows])  # noqa: E731

    if train_rows is None:
        train_rows, val_rows = validation_split(block.n_rows, split_key(settings.seed))
        if val_data is None and len(val_rows):
            val_data = (block.take(val_rows), y[val_rows])
    use_val = val_data is not None and val_data[0].n_rows > 0
    optimizer = settings.adam()
    history = MetricHistory()
    best_auc = -np.inf
    best_params: dict[str, np.ndarray] | None = None

    from .metrics import auc as auc_fn

    for epoch in range(1, settings.epochs + 1):
        t0 = time.perf_counter()
        skey = shuffle_key(settings.seed, settings.stage, epoch)
        loss_sum = 0.0
        n_seen = 0
        diverged = False
        for pos in batch_indices(len(train_rows), settings.batch_size, skey):
            rows = train_rows[pos]
            logits, cache = model.forward(block.take(rows))
            loss, grad = loss_fn(logits, rows)
            if not np.isfinite(loss):
                diverged = True
                continue
            grads = model.backward(cache, grad)
            adam_step(
                optimizer,
                model.params(),
                grads,
                decay_full=model.decay_full(),
                decay_rows=model.touched_rows(cache),
            )
            loss_sum += loss * len(rows)
            n_seen += len(rows)
        val_auc = None
        if use_val:
            val_block, val_y = val_data
            val_logits = model.predict_logits(val_block)
            val_auc = auc_fn(sigmoid(val_logits), val_y).auc
            if val_auc > best_auc + 1e-5:
                best_auc = val_auc
                best_params = copy_params(model.params())
        history.append(
            EpochRecord(
                epoch=epoch,
                train_loss=loss_sum / max(n_seen, 1),
                val_auc=val_auc,
                wall_time=time.perf_counter() - t0,
            )
        )
        if diverged:
            break
        if use_val and settings.patience is not None:
            stop, _ = early_stop(history.val_aucs, settings.patience)
            if stop:
                break

    if best_params is not None:
        model.set_params(best_params)
    return history


# ---------------------------------------------------------------------------
# Checkpoint helpers
# ---------------------------------------------------------------------------


def save_model(path, params: Mapping[str, np.ndarray], schema_hash: str,
               meta: dict | None = None) -> None:
    ckpt.save_checkpoint(path, dict(params), schema_hash, meta=meta)


def load_into(model, path, *, expect_schema_hash: str | None = None) -> dict:
    params, schema_hash, meta = ckpt.load_checkpoint(path)
    if expect_schema_hash is not None and schema_hash != expect_schema_hash:
        raise ValidationError(
            f"checkpoint schema hash {schema_hash} != expected {expect_schema_hash}"
        )
    model.set_params(params)
    return meta
