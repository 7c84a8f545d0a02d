"""Gradient-bridge label recovery.

From the batch-averaged weight gradient of one hidden layer, the attacker
recovers that layer's activation gradient (dividing by an estimated
activation), pushes it through the remaining FC layers with the
``(W W^T)^-1 W`` inversion, and reads the per-class label counts off the
recovered logit gradient: ``counts = B * (p_est - grad_logits)``.
"""

import warnings
from dataclasses import dataclass, field

import numpy as np

from . import models
from .flsim import GradientShare

DEFAULT_AUX_SAMPLES = 1000
SINGULAR_CUTOFF = 1e-10  # relative to the largest eigenvalue of W W^T
ILL_CONDITIONED = 1e12


class EstimationError(ValueError):
    pass


class IllConditionedWarning(RuntimeWarning):
    pass


@dataclass
class AuxEstimates:
    a_tilde: np.ndarray
    p_tilde: np.ndarray
    source: str  # "auxiliary" or "dummy"
    sample_count: int
    layer_index: int
    replaced_zeros: int = 0


@dataclass
class LabelCounts:
    raw: np.ndarray
    counts: np.ndarray
    batch_size: int


@dataclass
class BridgeResult:
    grad_logits: np.ndarray
    ill_conditioned: bool
    condition_numbers: list = field(default_factory=list)


# --- estimates ---------------------------------------------------------------

def make_dummy_data(input_shape, sample_count, seed):
    if sample_count < 1:
        raise EstimationError("sample_count must be >= 1")
    rng = np.random.default_rng(seed)
    return rng.standard_normal((sample_count, *tuple(input_shape)))


def select_balanced(labels, sample_count, n_classes, seed):
    """Indices of up to ``sample_count`` samples spread as evenly as possible over classes."""
    rng = np.random.default_rng(seed)
    labels = np.asarray(labels)
    pools = [rng.permutation(np.flatnonzero(labels == c)) for c in range(n_classes)]
    pools = [p for p in pools if p.size]
    picked, depth = [], 0
    while len(picked) < sample_count and any(depth < p.size for p in pools):
        for p in pools:
            if depth < p.size and len(picked) < sample_count:
                picked.append(p[depth])
        depth += 1
    return np.sort(np.array(picked, dtype=np.int64))


def _pick(data, labels, sample_count, n_classes, seed):
    data = np.asarray(data, dtype=np.float64)
    if data.shape[0] == 0:
        raise EstimationError("no data to estimate from")
    if sample_count is None or sample_count >= data.shape[0]:
        return data
    if labels is not None:
        return data[select_balanced(labels, sample_count, n_classes, seed)]
    return data[:sample_count]


def fill_zeros(a):
    """Replace zero entries with the mean of the non-zero entries."""
    a = np.array(a, dtype=np.float64)
    zero = a == 0
    if zero.all():
        raise EstimationError("estimated activation is identically zero")
    a[zero] = a[~zero].mean()
    return a, int(zero.sum())


def _activation(trace, layer_index):
    a = trace.a[layer_index]
    return a.reshape(a.shape[0], -1)


def estimate_features(model, data, layer_index, sample_count=DEFAULT_AUX_SAMPLES,
                      labels=None, seed=0):
    """Mean post-ReLU activation of ``layer_index`` over the estimation samples."""
    x = _pick(data, labels, sample_count, model.n_classes, seed)
    a = _activation(models.forward(model, x), layer_index).mean(axis=0)
    return fill_zeros(a)[0]


def estimate_probs(model, data, sample_count=DEFAULT_AUX_SAMPLES, labels=None, seed=0):
    x = _pick(data, labels, sample_count, model.n_classes, seed)
    return models.forward(model, x).probs.mean(axis=0)


def estimate(model, data, layer_index, sample_count=DEFAULT_AUX_SAMPLES, labels=None,
             seed=0, source="auxiliary"):
    """Both estimates from one forward pass."""
    x = _pick(data, labels, sample_count, model.n_classes, seed)
    trace = models.forward(model, x)
    a_tilde, replaced = fill_zeros(_activation(trace, layer_index).mean(axis=0))
    return AuxEstimates(
        a_tilde=a_tilde,
        p_tilde=trace.probs.mean(axis=0),
        source=source,
        sample_count=x.shape[0],
        layer_index=layer_index,
        replaced_zeros=replaced,
    )


# --- bridge --------------------------------------------------------------------

def bridge_first_stack(share, W, a_tilde):
    """Batch-averaged activation gradient of the shared layer.

    FC: ``diag(gW W^T)_k / a_k``; Conv with 1x1 output: ``<gW_k, W_k>_F / a_k``.
    Both reduce to summing ``gW * W`` over every axis but the first.
    """
    grad = share.grad if isinstance(share, GradientShare) else np.asarray(share)
    W = np.asarray(W, dtype=np.float64)
    if grad.shape != W.shape:
        raise ValueError(f"shared gradient {grad.shape} does not match weight {W.shape}")
    a_tilde = np.asarray(a_tilde, dtype=np.float64).ravel()
    if a_tilde.shape != (W.shape[0],):
        raise ValueError(f"a_tilde has {a_tilde.size} entries, layer has {W.shape[0]} units")
    if np.any(a_tilde == 0):
        raise EstimationError("a_tilde has zero entries; call fill_zeros first")
    inner = (grad * W).reshape(W.shape[0], -1).sum(axis=1)
    return inner / a_tilde


def _solve(W, g):
    """(W W^T)^-1 W g via the SVD of W, dropping directions below the cutoff."""
    U, s, Vt = np.linalg.svd(W, full_matrices=False)
    eig = s ** 2
    keep = eig > SINGULAR_CUTOFF * eig[0]
    cond = np.inf if not keep.all() or eig[-1] == 0 else float(eig[0] / eig[-1])
    coef = (Vt[keep] @ g) / s[keep]
    return U[:, keep] @ coef, cond


def bridge_fc_step(W, grad_x):
    W = np.asarray(W, dtype=np.float64)
    grad_x = np.asarray(grad_x, dtype=np.float64)
    if W.ndim != 2 or grad_x.shape != (W.shape[1],):
        raise ValueError(f"bridge step: W{W.shape} incompatible with grad_x{grad_x.shape}")
    if W.shape[0] > W.shape[1]:
        raise ValueError(f"bridge step needs out <= in features, got W{W.shape}")
    u, cond = _solve(W, grad_x)
    if cond > ILL_CONDITIONED:
        warnings.warn(f"W W^T condition number {cond:.3g}", IllConditionedWarning, stacklevel=2)
    return u


def bridge_to_logits(weights, grad_a):
    """Apply the FC inversion through ``weights`` (the layers after the shared one)."""
    g = np.asarray(grad_a, dtype=np.float64).ravel()
    conds = []
    for W in weights:
        W = np.asarray(W, dtype=np.float64)
        if W.ndim != 2:
            raise ValueError("only FC layers can follow the shared layer")
        if W.shape[0] > W.shape[1]:
            raise ValueError(f"bridge step needs out <= in features, got W{W.shape}")
        g, cond = _solve(W, g)
        conds.append(cond)
    return BridgeResult(
        grad_logits=g,
        ill_conditioned=any(c > ILL_CONDITIONED for c in conds),
        condition_numbers=conds,
    )


# --- label recovery ------------------------------------------------------------

def round_counts(raw, B):
    """Integer counts summing to ``B`` from real-valued estimates.

    Negatives are clamped, then floored. Missing units go one per class to the
    largest fractional residuals (ties: lower index); anything still missing
    goes to the class with the largest estimate. Excess units are taken back
    from non-empty classes with the smallest residual first.
    """
    r = np.clip(np.asarray(raw, dtype=np.float64), 0.0, None)
    counts = np.floor(r).astype(np.int64)
    resid = r - counts
    short = B - int(counts.sum())
    if short > 0:
        order = sorted(range(len(r)), key=lambda c: (-resid[c], c))
        for c in order:
            if short == 0 or resid[c] <= 0:
                break
            counts[c] += 1
            short -= 1
        if short > 0:
            top = min(range(len(r)), key=lambda c: (-r[c], c))
            counts[top] += short
    while short < 0:
        order = sorted(np.flatnonzero(counts > 0), key=lambda c: (resid[c], c))
        for c in order:
            if short == 0:
                break
            counts[c] -= 1
            short += 1
    return counts


def recover_labels(p_tilde, grad_logits, B):
    p_tilde = np.asarray(p_tilde, dtype=np.float64)
    grad_logits = np.asarray(grad_logits, dtype=np.float64)
    if p_tilde.shape != grad_logits.shape or p_tilde.ndim != 1:
        raise ValueError(f"p_tilde{p_tilde.shape} and grad_logits{grad_logits.shape} differ")
    if B < 1:
        raise ValueError("batch size must be >= 1")
    raw = B * (p_tilde - grad_logits)
    return LabelCounts(raw=raw, counts=round_counts(raw, B), batch_size=B)


def run_attack(model, share, estimates):
    """Full pipeline from an uploaded share to label counts.

    The attacker reads only global-model weights, the share and its own estimates.
    """
    l = share.layer_index
    grad_a = bridge_first_stack(share, model.weight(l), estimates.a_tilde)
    bridge = bridge_to_logits(model.weights()[l + 1:], grad_a)
    return recover_labels(estimates.p_tilde, bridge.grad_logits, share.batch_size), bridge
