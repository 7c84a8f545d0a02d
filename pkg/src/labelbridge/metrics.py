"""Instance- and class-level accuracy of recovered label counts."""

from dataclasses import dataclass

import numpy as np


class ContractError(ValueError):
    pass


@dataclass(frozen=True)
class RecoveryScore:
    ins_acc: float
    cls_acc: float
    batch_size: int


def _counts(x):
    x = np.asarray(x, dtype=np.int64)
    if x.ndim != 1 or np.any(x < 0):
        raise ContractError("counts must be a 1-d non-negative integer vector")
    return x


def ins_acc(predicted, truth):
    """Multiset overlap: sum_c min(pred_c, true_c) / B."""
    p, t = _counts(predicted), _counts(truth)
    if p.shape != t.shape:
        raise ContractError(f"class count mismatch: {p.shape} vs {t.shape}")
    B = int(t.sum())
    if int(p.sum()) != B:
        raise ContractError(f"predicted counts sum to {int(p.sum())}, truth to {B}")
    if B == 0:
        raise ContractError("empty batch")
    return float(np.minimum(p, t).sum() / B)


def cls_acc(predicted, truth):
    """Fraction of truly present classes that the prediction also marks present."""
    p, t = _counts(predicted), _counts(truth)
    if p.shape != t.shape:
        raise ContractError(f"class count mismatch: {p.shape} vs {t.shape}")
    present = t > 0
    if not present.any():
        raise ContractError("truth has no present class")
    return float(np.count_nonzero(present & (p > 0)) / np.count_nonzero(present))


def score(predicted, truth):
    return RecoveryScore(ins_acc(predicted, truth), cls_acc(predicted, truth), int(np.sum(truth)))
