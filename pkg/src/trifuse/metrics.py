"""Binary F1, concordance correlation and five-fold aggregation."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from decimal import Decimal, localcontext

import numpy as np

from .errors import ContractError

__all__ = ["FoldReport", "f1_binary", "ccc", "ccc_va", "aggregate_folds", "render_table"]

N_FOLDS = 5


def f1_binary(probs, labels, threshold: float = 0.5) -> float:
    """F1 of the positive class; predict 1 iff prob >= threshold, 0 when undefined."""
    p = np.asarray(probs, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if p.size == 0 or p.size != y.size:
        raise ContractError(f"f1_binary: need equal nonempty lengths, got {p.size} and {y.size}")
    pred = p >= threshold
    pos = y == 1
    tp = int(np.sum(pred & pos))
    fp = int(np.sum(pred & ~pos))
    fn = int(np.sum(~pred & pos))
    denom = 2 * tp + fp + fn
    return 2 * tp / denom if denom else 0.0


def ccc(pred, target, eps: float = 1e-12) -> float:
    """Lin's concordance correlation with population moments."""
    x = np.asarray(pred, dtype=np.float64).ravel()
    y = np.asarray(target, dtype=np.float64).ravel()
    if x.size != y.size or x.size < 2:
        raise ContractError(f"ccc: need equal lengths >= 2, got {x.size} and {y.size}")
    mx, my = x.mean(), y.mean()
    cov = np.mean((x - mx) * (y - my))
    return float(2.0 * cov / (x.var() + y.var() + (mx - my) ** 2 + eps))


def ccc_va(pred, target) -> float:
    """Mean CCC over the columns of N×k predictions (valence, arousal)."""
    P = np.asarray(pred, dtype=np.float64)
    Y = np.asarray(target, dtype=np.float64)
    if P.ndim == 1:
        return ccc(P, Y)
    if P.shape != Y.shape:
        raise ContractError(f"ccc: prediction {list(P.shape)} vs target {list(Y.shape)}")
    return float(np.mean([ccc(P[:, k], Y[:, k]) for k in range(P.shape[1])]))


@dataclass
class FoldReport:
    metric: str
    folds: list
    mean: float
    std: float

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    def row(self, label: str = "") -> str:
        cells = " ".join(f"{s:8.4f}" for s in self.folds)
        return f"{label:<12} {self.metric:<6} {cells} {self.mean:9.5f} {self.std:9.5f}"


def aggregate_folds(scores, metric: str) -> FoldReport:
    scores = [float(s) for s in scores]
    if len(scores) != N_FOLDS:
        raise ContractError(f"aggregate_folds: expected {N_FOLDS} scores, got {len(scores)}")
    # decimal arithmetic on the shortest repr of each score, so published
    # four-digit fold values average to the exact decimal mean
    with localcontext() as ctx:
        ctx.prec = 40
        dec = [Decimal(repr(s)) for s in scores]
        mean = sum(dec) / N_FOLDS
        std = (sum((s - mean) ** 2 for s in dec) / N_FOLDS).sqrt()
    return FoldReport(metric, scores, float(mean), float(std))


def render_table(reports: dict) -> str:
    """Aligned plain-text table, one row per named FoldReport."""
    head = f"{'dataset':<12} {'metric':<6} " + " ".join(f"{'fold ' + str(i + 1):>8}" for i in range(N_FOLDS))
    head += f" {'mean':>9} {'std':>9}"
    lines = [head, "-" * len(head)]
    lines += [rep.row(name) for name, rep in reports.items()]
    return "\n".join(lines) + "\n"
