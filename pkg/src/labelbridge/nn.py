"""Forward/backward arithmetic for FC, Conv and ReLU layers plus softmax cross-entropy.

All functions are pure and work on float64 numpy arrays. Single-sample
functions follow the shapes used in the derivations (``W @ x`` for FC,
``K * X`` for stride-1 unpadded convolution); the ``batch_*`` variants carry a
leading batch axis and are what the models module uses.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class DimensionError(ValueError):
    """Operand shapes do not conform."""


def _f64(a):
    return np.asarray(a, dtype=np.float64)


def _check_class(y, n_classes):
    if not 0 <= int(y) < n_classes:
        raise IndexError(f"class index {y} out of range for {n_classes} classes")


# --- fully connected -------------------------------------------------------

def fc_forward(W, x):
    W, x = _f64(W), _f64(x)
    if W.ndim != 2 or x.shape != (W.shape[1],):
        raise DimensionError(f"fc_forward: W{W.shape} incompatible with x{x.shape}")
    return W @ x


def fc_backward(W, x, grad_z):
    """Return ``(grad_W, grad_x)`` with grad_W = grad_z x^T and grad_x = W^T grad_z."""
    W, x, grad_z = _f64(W), _f64(x), _f64(grad_z)
    if W.ndim != 2 or x.shape != (W.shape[1],) or grad_z.shape != (W.shape[0],):
        raise DimensionError(
            f"fc_backward: W{W.shape}, x{x.shape}, grad_z{grad_z.shape} do not conform"
        )
    return np.outer(grad_z, x), W.T @ grad_z


def batch_fc_forward(W, X):
    """X is (B, M); returns (B, N)."""
    W, X = _f64(W), _f64(X)
    if W.ndim != 2 or X.ndim != 2 or X.shape[1] != W.shape[1]:
        raise DimensionError(f"batch_fc_forward: W{W.shape} incompatible with X{X.shape}")
    return X @ W.T


def batch_fc_backward(W, X, grad_Z):
    """Batch-averaged weight gradient and per-sample input gradients."""
    grad_W = grad_Z.T @ X / X.shape[0]
    return grad_W, grad_Z @ W


# --- convolution (stride 1, no padding) -----------------------------------

def _conv_out_shape(K, X):
    if K.ndim != 4 or X.ndim != 3 or K.shape[1] != X.shape[0]:
        raise DimensionError(f"conv: kernel{K.shape} incompatible with input{X.shape}")
    h_out = X.shape[1] - K.shape[2] + 1
    w_out = X.shape[2] - K.shape[3] + 1
    if h_out < 1 or w_out < 1:
        raise DimensionError(f"conv: kernel{K.shape} larger than input{X.shape}")
    return K.shape[0], h_out, w_out


def _windows(X, kh, kw):
    # (..., Cin, Hout, Wout, kh, kw)
    return sliding_window_view(X, (kh, kw), axis=(-2, -1))


def conv_forward(K, X):
    """Z[k,i,j] = sum_{c,h,w} K[k,c,h,w] * X[c, i+h, j+w]."""
    K, X = _f64(K), _f64(X)
    _conv_out_shape(K, X)
    return np.einsum("kchw,cijhw->kij", K, _windows(X, K.shape[2], K.shape[3]))


def conv_backward_weights(K, X, grad_Z):
    """grad_K[k,c,h,w] = sum_{i,j} grad_Z[k,i,j] * X[c, i+h, j+w]."""
    K, X, grad_Z = _f64(K), _f64(X), _f64(grad_Z)
    out = _conv_out_shape(K, X)
    if grad_Z.shape != out:
        raise DimensionError(f"conv_backward_weights: grad_Z{grad_Z.shape} != output {out}")
    return np.einsum("kij,cijhw->kchw", grad_Z, _windows(X, K.shape[2], K.shape[3]))


def conv_backward_input(K, X, grad_Z):
    """Gradient w.r.t. the conv input (full correlation with the flipped kernel)."""
    K, X, grad_Z = _f64(K), _f64(X), _f64(grad_Z)
    return batch_conv_backward(K, X[None], grad_Z[None])[1][0]


def batch_conv_forward(K, X):
    """X is (B, Cin, H, W); returns (B, Cout, Hout, Wout)."""
    K, X = _f64(K), _f64(X)
    if X.ndim != 4:
        raise DimensionError(f"batch_conv_forward: expected (B, C, H, W), got {X.shape}")
    _conv_out_shape(K, X[0])
    return np.einsum("kchw,bcijhw->bkij", K, _windows(X, K.shape[2], K.shape[3]))


def batch_conv_backward(K, X, grad_Z):
    """Batch-averaged kernel gradient and per-sample input gradients."""
    kh, kw = K.shape[2], K.shape[3]
    grad_K = np.einsum("bkij,bcijhw->kchw", grad_Z, _windows(X, kh, kw)) / X.shape[0]
    padded = np.pad(grad_Z, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
    flipped = K[:, :, ::-1, ::-1]
    grad_X = np.einsum("kchw,bkijhw->bcij", flipped, _windows(padded, kh, kw))
    return grad_K, grad_X


# --- ReLU ------------------------------------------------------------------

def relu_forward(z):
    return np.maximum(_f64(z), 0.0)


def relu_backward(z, grad_a):
    # derivative at exactly 0 is 0
    z, grad_a = _f64(z), _f64(grad_a)
    if z.shape != grad_a.shape:
        raise DimensionError(f"relu_backward: z{z.shape} != grad_a{grad_a.shape}")
    return np.where(z > 0, grad_a, 0.0)


# --- softmax cross-entropy --------------------------------------------------

def softmax(z):
    """Max-shifted softmax over the last axis."""
    z = _f64(z)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(z, y):
    """Return ``(loss, p)`` for logits ``z`` of shape (C,) and class index ``y``."""
    z = _f64(z)
    if z.ndim != 1:
        raise DimensionError(f"softmax_cross_entropy: expected 1-d logits, got {z.shape}")
    _check_class(y, z.shape[0])
    shifted = z - z.max()
    log_norm = np.log(np.exp(shifted).sum())
    p = np.exp(shifted - log_norm)
    return float(log_norm - shifted[int(y)]), p


def ce_logit_gradient(p, y):
    """p - onehot(y)."""
    g = _f64(p).copy()
    _check_class(y, g.shape[0])
    g[int(y)] -= 1.0
    return g


def one_hot(labels, n_classes):
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise IndexError(f"labels out of range for {n_classes} classes")
    out = np.zeros((labels.shape[0], n_classes))
    out[np.arange(labels.shape[0]), labels] = 1.0
    return out


def frobenius(a, b):
    """Sum of elementwise products."""
    return float(np.sum(_f64(a) * _f64(b)))
