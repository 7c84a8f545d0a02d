"""Numerical checks of the gradient identities behind the bridge.

Each check draws random instances, measures the worst deviation and compares
it with a fixed tolerance. ``run_all`` backs the ``labelbridge verify`` command.
"""

from dataclasses import dataclass

import numpy as np

from . import attack, models, nn


@dataclass
class CheckResult:
    name: str
    instances: int
    max_error: float
    tolerance: float

    @property
    def passed(self):
        return bool(self.max_error <= self.tolerance)

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status}  {self.name:<48} n={self.instances:<4d} max_err={self.max_error:.3e} tol={self.tolerance:.0e}"


def _rel(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), 1e-300))


def _random_fc_instance(rng):
    n, m = rng.integers(1, 8), rng.integers(1, 8)
    W = rng.uniform(-1, 1, (n, m))
    x = rng.uniform(-1, 1, m)
    grad_z = rng.uniform(-1, 1, n)
    return W, x, grad_z


def check_fc_identities(n=200, seed=0):
    rng = np.random.default_rng(seed)
    errs = []
    for _ in range(n):
        W, x, grad_z = _random_fc_instance(rng)
        z = nn.fc_forward(W, x)
        gW, gx = nn.fc_backward(W, x, grad_z)
        errs.append(np.max(np.abs(np.outer(gx, x) - W.T @ gW)))
        errs.append(np.max(np.abs(np.outer(grad_z, z) - gW @ W.T)))
        errs.append(np.max(np.abs(grad_z * z - np.diag(gW @ W.T))))
    return CheckResult("FC input/weight/output gradient identities", n, float(max(errs)), 1e-9)


def check_fc_output_inversion(n=200, seed=1):
    rng = np.random.default_rng(seed)
    errs = []
    for _ in range(n):
        m = int(rng.integers(2, 10))
        k = int(rng.integers(1, m + 1))
        W = rng.uniform(-1, 1, (k, m))
        if np.linalg.cond(W @ W.T) >= 1e8:
            continue
        grad_z = rng.uniform(-1, 1, k)
        _, gx = nn.fc_backward(W, rng.uniform(-1, 1, m), grad_z)
        errs.append(_rel(attack.bridge_fc_step(W, gx), grad_z))
    return CheckResult("FC output gradient from input gradient", len(errs), float(max(errs)), 1e-6)


def check_conv_frobenius(n=200, seed=2):
    rng = np.random.default_rng(seed)
    errs = []
    for _ in range(n):
        cout, cin = rng.integers(1, 4, size=2)
        kh, kw = rng.integers(1, 4, size=2)
        h, w = kh + rng.integers(0, 3), kw + rng.integers(0, 3)
        K = rng.uniform(-1, 1, (cout, cin, kh, kw))
        X = rng.uniform(-1, 1, (cin, h, w))
        Z = nn.conv_forward(K, X)
        gZ = rng.uniform(-1, 1, Z.shape)
        gK = nn.conv_backward_weights(K, X, gZ)
        for k in range(cout):
            errs.append(abs(nn.frobenius(gK[k], K[k]) - nn.frobenius(gZ[k], Z[k])))
    return CheckResult("Conv kernel/output Frobenius identity", n, float(max(errs)), 1e-9)


def check_relu_identity(n=200, seed=3):
    rng = np.random.default_rng(seed)
    errs = []
    for _ in range(n):
        z = rng.uniform(-1, 1, int(rng.integers(1, 20)))
        ga = rng.uniform(-1, 1, z.shape)
        gz = nn.relu_backward(z, ga)
        errs.append(np.max(np.abs(gz * z - ga * nn.relu_forward(z))))
    return CheckResult("ReLU input/output gradient identity", n, float(max(errs)), 1e-9)


def _positive_stack(rng):
    """FC-ReLU stack with strictly positive activations and a downstream loss."""
    m = int(rng.integers(2, 10))
    k = int(rng.integers(1, m + 1))
    W = rng.uniform(0.01, 1, (k, m))
    x = rng.uniform(0.01, 1, m)
    return W, x


def check_fc_relu_inversion(n=200, seed=4):
    rng = np.random.default_rng(seed)
    err_dx, err_dw = [], []
    for _ in range(n):
        W, x = _positive_stack(rng)
        z = nn.fc_forward(W, x)
        a = nn.relu_forward(z)
        ga = rng.uniform(-1, 1, a.shape)  # upstream gradient from any loss
        gz = nn.relu_backward(z, ga)
        gW, gx = nn.fc_backward(W, x, gz)
        if np.linalg.cond(W @ W.T) < 1e8:
            err_dx.append(_rel(attack.bridge_fc_step(W, gx), ga))
        err_dw.append(_rel(np.diag(gW @ W.T) / a, ga))
    return [
        CheckResult("FC-ReLU activation gradient from input grad", len(err_dx), float(max(err_dx)), 1e-6),
        CheckResult("FC-ReLU activation gradient from weight grad", n, float(max(err_dw)), 1e-6),
    ]


def check_conv_relu_inversion(n=200, seed=5):
    rng = np.random.default_rng(seed)
    errs = []
    for _ in range(n):
        cout, cin = rng.integers(1, 5, size=2)
        kh, kw = rng.integers(1, 4, size=2)
        K = rng.uniform(0.01, 1, (cout, cin, kh, kw))
        X = rng.uniform(0.01, 1, (cin, kh, kw))  # 1x1 output
        Z = nn.conv_forward(K, X)
        A = nn.relu_forward(Z)
        gA = rng.uniform(-1, 1, A.shape)
        gK = nn.conv_backward_weights(K, X, nn.relu_backward(Z, gA))
        rec = np.array([nn.frobenius(gK[k], K[k]) for k in range(cout)]) / A.ravel()
        errs.append(_rel(rec, gA.ravel()))
    return CheckResult("Conv-ReLU (1x1) activation gradient", n, float(max(errs)), 1e-6)


def _central_diff(f, x, step=1e-4):
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        e = np.zeros_like(x)
        e[i] = step
        g[i] = (f(x + e) - f(x - e)) / (2 * step)
    return g


def check_finite_differences(n=20, seed=6):
    rng = np.random.default_rng(seed)
    errs = []
    for _ in range(n):
        W, x, c = rng.uniform(-1, 1, (3, 4)), rng.uniform(-1, 1, 4), rng.uniform(-1, 1, 3)
        gW, gx = nn.fc_backward(W, x, c)
        errs.append(_rel(gW, _central_diff(lambda w: c @ nn.fc_forward(w, x), W)))
        errs.append(_rel(gx, _central_diff(lambda v: c @ nn.fc_forward(W, v), x)))

        K, X = rng.uniform(-1, 1, (2, 2, 2, 2)), rng.uniform(-1, 1, (2, 3, 3))
        C = rng.uniform(-1, 1, (2, 2, 2))
        errs.append(_rel(nn.conv_backward_weights(K, X, C),
                         _central_diff(lambda k: np.sum(C * nn.conv_forward(k, X)), K)))
        errs.append(_rel(nn.conv_backward_input(K, X, C),
                         _central_diff(lambda v: np.sum(C * nn.conv_forward(K, v)), X)))

        z = rng.uniform(-1, 1, 6)
        z[np.abs(z) < 1e-3] = 0.5
        ga = rng.uniform(-1, 1, 6)
        errs.append(_rel(nn.relu_backward(z, ga),
                         _central_diff(lambda v: ga @ nn.relu_forward(v), z)))

        logits, y = rng.uniform(-1, 1, 5), int(rng.integers(0, 5))
        _, p = nn.softmax_cross_entropy(logits, y)
        errs.append(_rel(nn.ce_logit_gradient(p, y),
                         _central_diff(lambda v: nn.softmax_cross_entropy(v, y)[0], logits)))
    return CheckResult("Analytic vs central-difference gradients", n, float(max(errs)), 1e-5)


def exactness_models():
    """(label, spec) pairs covering MLP depths 2..6 and a Conv first stack, for C in {2, 10, 100}."""
    out = []
    for C in (2, 10, 100):
        for depth in range(2, 7):
            hidden = [128 + 16 * (depth - 2 - i) for i in range(depth - 1)]
            out.append((f"mlp depth={depth} C={C}", models.ModelSpec.mlp(24, hidden, C)))
        out.append((
            f"conv first stack C={C}",
            models.ModelSpec(input_shape=(2, 5, 5), hidden=(110,), n_classes=C,
                             first_stack="conv", conv_channels=120, extractor=((3, 2, 2),)),
        ))
    return out


def exactness_trial(spec, B, duplicate, seed):
    """Attack with the true shared-layer activation and true mean probabilities.

    Returns (recovered counts, true counts, raw lambda). Uses non-negative inputs
    so every bottom activation is positive.
    """
    rng = np.random.default_rng(seed)
    model = models.build_model(spec, models.POSITIVE_UNIFORM, seed=seed)
    C = spec.n_classes
    if duplicate:
        x = np.repeat(rng.uniform(0, 1, (1, *spec.input_shape)), B, axis=0)
    else:
        x = rng.uniform(0, 1, (B, *spec.input_shape))
    y = rng.integers(0, C, B)
    layer = model.bottom_start
    trace = models.forward(model, x)
    grads = models.backward(model, trace, y)
    from .flsim import GradientShare

    share = GradientShare(layer, grads.weight[layer], B)
    est = attack.AuxEstimates(
        a_tilde=trace.a[layer][0].ravel(), p_tilde=trace.probs.mean(axis=0),
        source="auxiliary", sample_count=B, layer_index=layer,
    )
    rec, _ = attack.run_attack(model, share, est)
    return rec.counts, np.bincount(y, minlength=C), rec.raw


def check_exactness(seed=7):
    from . import metrics

    worst_ins, worst_cls, worst_sum, n = 1.0, 1.0, 0.0, 0
    for i, (_, spec) in enumerate(exactness_models()):
        for B, dup in ((1, False), (8, True)):
            counts, truth, raw = exactness_trial(spec, B, dup, seed + i)
            worst_ins = min(worst_ins, metrics.ins_acc(counts, truth))
            worst_cls = min(worst_cls, metrics.cls_acc(counts, truth))
            worst_sum = max(worst_sum, abs(raw.sum() - B))
            n += 1
    return [
        CheckResult("End-to-end exactness (1 - worst InsAcc/ClsAcc)", n,
                    max(1 - worst_ins, 1 - worst_cls), 0.0),
        CheckResult("Label-count conservation |sum(raw) - B|", n, worst_sum, 1e-6),
    ]


def run_all():
    results = [check_fc_identities(), check_fc_output_inversion(), check_conv_frobenius(), check_relu_identity()]
    results += check_fc_relu_inversion()
    results += [check_conv_relu_inversion(), check_finite_differences()]
    results += check_exactness()
    return results
