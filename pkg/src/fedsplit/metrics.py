"""Evaluation metrics and model selection.

AUC is computed rank-based (Mann-Whitney U) with half credit for ties,
O(n log n). Early stopping halts after `patience` consecutive validation
evaluations that fail to beat the running best by more than 1e-5 absolute
AUC. Histories serialize to line-delimited JSON, one record per epoch.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import MetricUndefinedError, ValidationError

IMPROVEMENT_EPS = 1e-5


@dataclass(frozen=True)
class AucResult:
    auc: float
    n_pos: int
    n_neg: int


def auc(scores, labels) -> AucResult:
    """Area under the ROC curve via average ranks; ties get half credit.

    Labels must be 0/1 with at least one of each class. Rank sums are exact
    half-integers, so the result matches brute-force pair counting bit for
    bit.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise ValidationError(f"scores {s.shape} and labels {y.shape} must be equal 1-D")
    if not np.all(np.isin(y, (0, 1))):
        raise ValidationError("labels must be 0 or 1")
    n_pos = int((y == 1).sum())
    n_neg = int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricUndefinedError(
            f"AUC undefined with {n_pos} positives and {n_neg} negatives"
        )
    order = np.argsort(s, kind="mergesort")
    ranks = np.empty(len(s), dtype=np.float64)
    sorted_scores = s[order]
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        # average of 1-based ranks i+1 .. j+1 is an exact half-integer
        ranks[order[i : j + 1]] = (i + j + 2) / 2.0
        i = j + 1
    rank_sum_pos = ranks[np.asarray(y) == 1].sum()
    u = rank_sum_pos - n_pos * (n_pos + 1) / 2.0
    return AucResult(auc=u / (n_pos * n_neg), n_pos=n_pos, n_neg=n_neg)


@dataclass
class EpochRecord:
    """One training epoch's bookkeeping."""

    epoch: int  # 1-based
    train_loss: float
    val_auc: float | None
    wall_time: float
    messages_sent: int = 0
    bytes_sent: int = 0
    extra: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {
                "epoch": self.epoch,
                "train_loss": self.train_loss,
                "val_auc": self.val_auc,
                "wall_time": self.wall_time,
                "messages_sent": self.messages_sent,
                "bytes_sent": self.bytes_sent,
                **self.extra,
            }
        )


@dataclass
class MetricHistory:
    """Per-epoch records plus best-epoch accounting (argmax validation AUC,
    first occurrence on ties)."""

    records: list[EpochRecord] = field(default_factory=list)

    def append(self, record: EpochRecord) -> None:
        self.records.append(record)

    @property
    def val_aucs(self) -> list[float]:
        return [r.val_auc for r in self.records if r.val_auc is not None]

    @property
    def best_epoch(self) -> int | None:
        """1-based epoch of the best validation AUC; None without evals."""
        best = None
        best_auc = -np.inf
        for r in self.records:
            if r.val_auc is not None and r.val_auc > best_auc:
                best_auc = r.val_auc
                best = r.epoch
        return best

    @property
    def best_val_auc(self) -> float | None:
        aucs = self.val_aucs
        return max(aucs) if aucs else None

    def to_jsonl(self) -> str:
        return "\n".join(r.to_json() for r in self.records) + ("\n" if self.records else "")

    @classmethod
    def from_jsonl(cls, text: str) -> "MetricHistory":
        history = cls()
        for line in text.splitlines():
            if not line.strip():
                continue
            raw = json.loads(line)
            known = {"epoch", "train_loss", "val_auc", "wall_time", "messages_sent", "bytes_sent"}
            history.append(
                EpochRecord(
                    epoch=raw["epoch"],
                    train_loss=raw["train_loss"],
                    val_auc=raw["val_auc"],
                    wall_time=raw["wall_time"],
                    messages_sent=raw.get("messages_sent", 0),
                    bytes_sent=raw.get("bytes_sent", 0),
                    extra={k: v for k, v in raw.items() if k not in known},
                )
            )
        return history


def early_stop(val_aucs, patience: int) -> tuple[bool, int]:
    """Early-stopping decision over a sequence of validation AUCs.

    Returns (stop, best_index). Stops once `patience` consecutive
    evaluations fail to improve the best AUC by more than IMPROVEMENT_EPS;
    patience 0 stops at the first non-improvement. best_index is 0-based
    (first occurrence wins ties).
    """
    aucs = list(val_aucs)
    if not aucs:
        raise ValidationError("early_stop needs at least one evaluation")
    best = aucs[0]
    best_index = 0
    stale = 0
    for i, value in enumerate(aucs[1:], start=1):
        if value > best + IMPROVEMENT_EPS:
            best = value
            best_index = i
            stale = 0
        else:
            stale += 1
            if stale >= max(patience, 1):
                return True, best_index
    return False, best_index


def epochs_to_auc(history: MetricHistory, target_auc: float) -> int | None:
    """First 1-based epoch whose validation AUC reaches target; None if never."""
    for r in history.records:
        if r.val_auc is not None and r.val_auc >= target_auc:
            return r.epoch
    return None
