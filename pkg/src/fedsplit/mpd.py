"""Matched Pair Detection pretraining on unlabeled aligned pairs.

Each unlabeled batch yields one positive batch (the aligned pairs, target 1)
and k negative batches built by permuting one party's half with a
derangement -- a permutation with no fixed point, so no "negative" row is a
true pair (up to duplicate rows). The federated model is trained to tell
the two apart; afterwards only the bottom encoders are kept.

Because the permutation acts on rows and the bottom model is row-wise, the
driver permutes the already-computed hidden block instead of re-encoding
permuted raw rows: f(P X) = P f(X) exactly. The unpermuted party's hidden
block is reused for the positive and every negative batch, so one batch
still costs exactly one Activation and one Gradient message, and the
permuting side needs no extra coordination.

The objective per batch of m rows with k negatives per positive is

    loss = -mean_i log sigma(z_pos_i) - (1/m) * sum_j log sigma(-z_neg_j)

which is the negated, batch-size-normalized form of the sum of
log-likelihood terms over one positive and k negative draws per pair. At
convergence the top model's logit estimates the pointwise mutual
information of the pair shifted by -log k, which `pmi_probe` checks against
exact counts on a small categorical dataset.
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import dataclass

import numpy as np

from .data import Batch, FeatureBlock, batch_indices
from .errors import ProtocolError, ValidationError
from .metrics import EpochRecord, MetricHistory
from .numeric import F32, log_sigmoid, sigmoid
from .splitnn import (
    STREAM_DERANGE,
    ActiveParty,
    SplitModel,
    TrainSettings,
    shuffle_key,
    _prefix,
)
from .transport import MsgType


def sample_derangement(n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform random derangement of range(n) by rejection sampling.

    Returns mapping where mapping[i] is the source row for destination i,
    with mapping[i] != i for all i. The acceptance rate tends to 1/e, so the
    expected number of draws is below three.
    """
    if n < 2:
        raise ValidationError(f"no derangement exists for n={n}")
    idx = np.arange(n)
    while True:
        perm = rng.permutation(n)
        if not np.any(perm == idx):
            return perm


def sample_weighted_derangement(weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Derangement whose sources are drawn proportionally to `weights`.

    Sequential weighted choice without replacement, rejecting fixed points;
    if the final slot can only self-map, it is repaired by swapping with a
    random earlier destination. Not uniform over derangements -- it biases
    sources toward high-weight (frequent) rows.
    """
    n = len(weights)
    if n < 2:
        raise ValidationError(f"no derangement exists for n={n}")
    w = np.asarray(weights, dtype=np.float64)
    if np.any(w <= 0):
        raise ValidationError("weights must be positive")
    mapping = np.empty(n, dtype=np.int64)
    available = list(range(n))
    avail_w = list(w)
    for dest in range(n):
        if len(available) == 1:
            mapping[dest] = available[0]
            break
        choices = [s for s in available if s != dest]
        probs = np.array([w[s] for s in choices], dtype=np.float64)
        probs /= probs.sum()
        source = choices[rng.choice(len(choices), p=probs)]
        mapping[dest] = source
        pos = available.index(source)
        available.pop(pos)
        avail_w.pop(pos)
    if mapping[n - 1] == n - 1:
        j = int(rng.integers(0, n - 1))
        mapping[n - 1], mapping[j] = mapping[j], mapping[n - 1]
    return mapping


def _row_counts(block: FeatureBlock) -> np.ndarray:
    """How many times each row's raw value occurs within the block."""
    counts = np.empty(block.n_rows, dtype=np.float64)
    raws = [
        block.cat[i].tobytes() + block.num[i].tobytes() for i in range(block.n_rows)
    ]
    tally: dict[bytes, int] = {}
    for raw in raws:
        tally[raw] = tally.get(raw, 0) + 1
    for i, raw in enumerate(raws):
        counts[i] = tally[raw]
    return counts


@dataclass
class MpdBatch:
    """One positive batch plus its k permuted negative batches."""

    positive: Batch  # aligned pairs, target 1
    negative: Batch  # k * m permuted pairs, target 0; reuses the B rows
    perms: list[np.ndarray]
    k: int
    permuted_party: str


def build_mpd_batch(
    batch: Batch,
    k: int,
    rng: np.random.Generator,
    *,
    permute_party: str = "A",
    frequency_weighted: bool = False,
) -> MpdBatch:
    """Build the positive/negative pair batches for one unlabeled batch.

    The permuted party's rows are shuffled by k independent derangements;
    the other party's rows are reused untouched in every negative batch.
    """
    m = batch.n_rows
    if m < 2:
        raise ValidationError("matched-pair batches need at least 2 rows")
    if k < 1:
        raise ValidationError("need at least one negative batch")
    if permute_party not in ("A", "B"):
        raise ValidationError("permute_party must be 'A' or 'B'")
    moving = batch.a if permute_party == "A" else batch.b
    if frequency_weighted:
        weights = _row_counts(moving)
        perms = [sample_weighted_derangement(weights, rng) for _ in range(k)]
    else:
        perms = [sample_derangement(m, rng) for _ in range(k)]
    moved = FeatureBlock.concat([moving.take(p) for p in perms])
    fixed = FeatureBlock.concat([batch.b if permute_party == "A" else batch.a] * k)
    if permute_party == "A":
        negative = Batch(a=moved, b=fixed, y=np.zeros(k * m, dtype=F32))
    else:
        negative = Batch(a=fixed, b=moved, y=np.zeros(k * m, dtype=F32))
    positive = Batch(a=batch.a, b=batch.b, y=np.ones(m, dtype=F32))
    return MpdBatch(
        positive=positive, negative=negative, perms=perms, k=k, permuted_party=permute_party
    )


def mpd_loss(
    logits_pos: np.ndarray, logits_neg: np.ndarray
) -> tuple[float, np.ndarray, np.ndarray]:
    """Match/mismatch loss and its gradients at the logits.

    loss = -mean(log sigma(z+)) - sum(log sigma(-z-)) / m, m = len(z+).
    Gradients: d/dz+ = (sigma(z+) - 1)/m, d/dz- = sigma(z-)/m.
    """
    z_pos = np.asarray(logits_pos, dtype=np.float64)
    z_neg = np.asarray(logits_neg, dtype=np.float64)
    if z_pos.size == 0 or z_neg.size == 0:
        raise ValidationError("both positive and negative logits are required")
    m = z_pos.shape[0]
    loss = float(-log_sigmoid(z_pos).mean() - log_sigmoid(-z_neg).sum() / m)
    grad_pos = ((sigmoid(z_pos) - 1.0) / m).astype(F32)
    grad_neg = (sigmoid(z_neg) / m).astype(F32)
    return loss, grad_pos, grad_neg


@dataclass
class PretrainResult:
    """What pretraining leaves behind.

    Fine-tuning and distillation consume only the bottom encoders (reached
    through the party objects); the match-task top stays here for
    diagnostics such as the PMI probe.
    """

    history: MetricHistory
    mpd_top: object
    config_hash: str = ""
    skipped_batches: int = 0


def pretrain(
    active: ActiveParty,
    settings: TrainSettings,
    *,
    k: int = 1,
    permute_party: str = "A",
    frequency_weighted: bool = False,
    config_hash: str = "",
) -> PretrainResult:
    """Federated matched-pair pretraining over the unlabeled segment.

    Runs the full epoch budget (no early stopping: there is no labeled
    validation signal), tracking the match loss and match accuracy per
    epoch. Batches that shrink below 2 rows are skipped and counted. The
    label column is never touched: this path reads only feature blocks.
    """
    dataset = active.dataset
    if dataset.unlabeled is None or dataset.unlabeled.n_rows < 2:
        raise ValidationError("pretraining needs an unlabeled segment with >= 2 rows")
    seg = dataset.unlabeled
    n = seg.n_rows
    active.start_phase(settings, "mpd")
    history = MetricHistory()
    skipped = 0

    for epoch in range(1, settings.epochs + 1):
        t0 = time.perf_counter()
        counters = active.channel.counters
        msgs_before = sum(counters.sent.values()) + sum(counters.received.values())
        skey = shuffle_key(settings.seed, "mpd", epoch)
        active.channel.send_new(
            MsgType.CONTROL,
            meta={
                "cmd": "epoch",
                "segment": "unlabeled",
                "subset": "all",
                "split_seed": str(settings.seed),
                "shuffle": ",".join(str(x) for x in skey),
                "batch_size": str(settings.batch_size),
                "drop_short": "1",
            },
        )
        loss_sum = 0.0
        hits = 0
        total = 0
        n_seen = 0
        for batch_no, pos in enumerate(
            batch_indices(n, settings.batch_size, skey, drop_short=True)
        ):
            m = len(pos)
            if m < 2:  # unreachable with drop_short; kept as a guard
                skipped += 1
                warnings.warn("skipping matched-pair batch with fewer than 2 rows")
                continue
            rng = np.random.default_rng(
                [settings.seed, STREAM_DERANGE, epoch, batch_no]
            )
            block_a = seg.a.take(pos)
            if frequency_weighted:
                weights = _row_counts(block_a if permute_party == "A" else seg.b.take(pos))
                perms = [sample_weighted_derangement(weights, rng) for _ in range(k)]
            else:
                perms = [sample_derangement(m, rng) for _ in range(k)]
            loss = _mpd_protocol_step(active, block_a, perms, permute_party)
            loss_sum += loss[0] * m
            hits += loss[1]
            total += loss[2]
            n_seen += m
        msgs_after = sum(counters.sent.values()) + sum(counters.received.values())
        history.append(
            EpochRecord(
                epoch=epoch,
                train_loss=loss_sum / max(n_seen, 1),
                val_auc=None,
                wall_time=time.perf_counter() - t0,
                messages_sent=msgs_after - msgs_before,
                extra={"match_accuracy": hits / max(total, 1)},
            )
        )
    return PretrainResult(
        history=history,
        mpd_top=active.top,
        config_hash=config_hash,
        skipped_batches=skipped,
    )


def _mpd_protocol_step(
    active: ActiveParty,
    block_a: FeatureBlock,
    perms: list[np.ndarray],
    permute_party: str,
) -> tuple[float, int, int]:
    """One pretraining batch over the wire: one Activation in, one Gradient out.

    Returns (loss, correct_classifications, classified_rows).
    """
    msg = active.channel.expect(MsgType.ACTIVATION)
    h_b = msg.payload
    m = block_a.n_rows
    if h_b.shape[0] != m:
        raise ProtocolError(
            f"activation carries {h_b.shape[0]} rows for a {m}-row batch"
        )
    h_a, cache_a = active.bottom.forward(block_a)

    fused_pos = np.hstack([h_a, h_b])
    logits_pos, cache_pos = active.top.forward(fused_pos)
    neg_caches = []
    neg_logits = []
    for perm in perms:
        if permute_party == "A":
            fused_neg = np.hstack([h_a[perm], h_b])
        else:
            fused_neg = np.hstack([h_a, h_b[perm]])
        z, cache = active.top.forward(fused_neg)
        neg_caches.append(cache)
        neg_logits.append(z)
    logits_neg = np.concatenate(neg_logits)

    loss, grad_pos, grad_neg = mpd_loss(logits_pos, logits_neg)

    d_a = h_a.shape[1]
    grad_fused_pos, grads_top = active.top.backward(cache_pos, grad_pos)
    grad_h_a = grad_fused_pos[:, :d_a].copy()
    grad_h_b = grad_fused_pos[:, d_a:].copy()
    for i, perm in enumerate(perms):
        g = grad_neg[i * m : (i + 1) * m]
        grad_fused_neg, g_top = active.top.backward(neg_caches[i], g)
        for name, value in g_top.items():
            grads_top[name] = grads_top[name] + value
        if permute_party == "A":
            np.add.at(grad_h_a, perm, grad_fused_neg[:, :d_a])
            grad_h_b += grad_fused_neg[:, d_a:]
        else:
            grad_h_a += grad_fused_neg[:, :d_a]
            np.add.at(grad_h_b, perm, grad_fused_neg[:, d_a:])

    active.channel.send_new(
        MsgType.GRADIENT, payload=np.ascontiguousarray(grad_h_b, dtype=F32)
    )
    grads_bottom = active.bottom.backward(cache_a, grad_h_a)
    active._touched = {
        f"bottom.{k}": v for k, v in active.bottom.touched_rows(cache_a).items()
    }
    active.apply_update(
        {**_prefix(grads_top, "top"), **_prefix(grads_bottom, "bottom")}
    )
    hits = int((logits_pos > 0).sum() + (logits_neg < 0).sum())
    total = int(logits_pos.size + logits_neg.size)
    return loss, hits, total


@dataclass
class PmiPair:
    value_a: int
    value_b: int
    count: int
    pmi: float
    logit: float


@dataclass
class PmiProbeReport:
    """Agreement between trained match logits and exact shifted PMI."""

    pairs: list[PmiPair]
    pearson: float
    mean_abs_dev: float
    mean_logit: float
    k: int
    min_count: int


def pmi_probe(
    model: SplitModel,
    block_a: FeatureBlock,
    block_b: FeatureBlock,
    *,
    k: int = 1,
    min_count: int = 50,
) -> PmiProbeReport:
    """Compare trained match logits with PMI - log k from exact counts.

    The probe data must be single-categorical-field per party. Pairs
    occurring fewer than min_count times are excluded. PMI is computed from
    the dataset's own counts: log(#(a,b) * N / (#a * #b)).
    """
    if block_a.cat.shape[1] != 1 or block_b.cat.shape[1] != 1:
        raise ValidationError("pmi_probe expects one categorical field per party")
    a = block_a.cat[:, 0]
    b = block_b.cat[:, 0]
    n = len(a)
    pair_counts: dict[tuple[int, int], int] = {}
    for va, vb in zip(a.tolist(), b.tolist()):
        pair_counts[(va, vb)] = pair_counts.get((va, vb), 0) + 1
    count_a: dict[int, int] = {}
    count_b: dict[int, int] = {}
    for va in a.tolist():
        count_a[va] = count_a.get(va, 0) + 1
    for vb in b.tolist():
        count_b[vb] = count_b.get(vb, 0) + 1

    kept = [(pair, c) for pair, c in sorted(pair_counts.items()) if c >= min_count]
    if not kept:
        raise ValidationError(f"no pair reaches min_count={min_count}")
    probe_a = FeatureBlock(
        cat=np.array([[p[0][0]] for p in kept], dtype=np.int64),
        num=np.zeros((len(kept), 0), dtype=F32),
    )
    probe_b = FeatureBlock(
        cat=np.array([[p[0][1]] for p in kept], dtype=np.int64),
        num=np.zeros((len(kept), 0), dtype=F32),
    )
    logits = model.predict_logits(probe_a, probe_b)

    pairs = []
    for ((va, vb), c), logit in zip(kept, logits):
        pmi = math.log(c * n / (count_a[va] * count_b[vb]))
        pairs.append(PmiPair(value_a=va, value_b=vb, count=c, pmi=pmi, logit=float(logit)))
    target = np.array([p.pmi - math.log(k) for p in pairs])
    got = np.array([p.logit for p in pairs])
    if len(pairs) >= 2 and target.std() > 0 and got.std() > 0:
        pearson = float(np.corrcoef(target, got)[0, 1])
    else:
        pearson = float("nan")
    return PmiProbeReport(
        pairs=pairs,
        pearson=pearson,
        mean_abs_dev=float(np.abs(got - target).mean()),
        mean_logit=float(got.mean()),
        k=k,
        min_count=min_count,
    )
