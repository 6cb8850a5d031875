"""Test oracles shared by unit and acceptance tests."""

import numpy as np

from sernet.autograd import Tensor
from sernet.autograd import functional as F
from sernet.losses import cross_entropy, focal_loss


def numeric_grad(f, arr, h=1e-5):
    """Central finite differences of scalar ``f()`` w.r.t. ``arr`` (mutated in place)."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + h
        up = f()
        arr[i] = old - h
        down = f()
        arr[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def rel_error(analytic, numeric):
    scale = max(np.max(np.abs(numeric)), np.max(np.abs(analytic)), 1e-8)
    return float(np.max(np.abs(analytic - numeric)) / scale)


def brute_conv2d(x, k, b, stride):
    """Direct nested-loop cross-correlation with TF-style same padding."""
    n, h, w, cin = x.shape
    kh, kw, _, cout = k.shape
    sh, sw = stride
    ho, wo = -(-h // sh), -(-w // sw)
    ph = max((ho - 1) * sh + kh - h, 0)
    pw = max((wo - 1) * sw + kw - w, 0)
    top, left = ph // 2, pw // 2
    out = np.zeros((n, ho, wo, cout))
    for s in range(n):
        for i in range(ho):
            for j in range(wo):
                for o in range(cout):
                    acc = b[o] if b is not None else 0.0
                    for di in range(kh):
                        for dj in range(kw):
                            r, c = i * sh + di - top, j * sw + dj - left
                            if 0 <= r < h and 0 <= c < w:
                                for ci in range(cin):
                                    acc += x[s, r, c, ci] * k[di, dj, ci, o]
                    out[s, i, j, o] = acc
    return out


def _away_from_zero(rng, shape, margin=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * margin, x)


def _leaf(a):
    return Tensor(np.array(a, dtype=np.float64), requires_grad=True)


def case_conv2d(rng):
    kh, kw = rng.integers(1, 5, size=2)
    stride = tuple(int(s) for s in rng.integers(1, 3, size=2))
    cin, cout = rng.integers(1, 4, size=2)
    x = _leaf(rng.standard_normal((2, int(rng.integers(3, 7)), int(rng.integers(3, 7)), cin)))
    k = _leaf(rng.standard_normal((kh, kw, cin, cout)))
    b = _leaf(rng.standard_normal(cout))
    return (lambda: F.conv2d(x, k, b, stride)), [x, k, b]


def case_multi_conv2d(rng):
    cin = int(rng.integers(1, 3))
    x = _leaf(rng.standard_normal((2, 5, 6, cin)))
    ks = [_leaf(rng.standard_normal((kh, kw, cin, 2))) for kh, kw in ((3, 1), (1, 4), (2, 2))]
    bs = [_leaf(rng.standard_normal(2)) for _ in ks]
    return (lambda: F.multi_conv2d(x, ks, bs)), [x] + ks + bs


def case_batch_norm(rng, relu=False):
    training = bool(rng.integers(0, 2))
    c = int(rng.integers(1, 4))
    x = _leaf(rng.standard_normal((3, 2, 3, c)) * 2 + 1)
    gamma = _leaf(rng.standard_normal(c))
    beta = _leaf(rng.standard_normal(c))
    mm, mv = rng.standard_normal(c), rng.uniform(0.5, 2, c)
    if relu:
        beta.data += np.sign(beta.data) * 0.1  # keep outputs off the ReLU kink
    return (lambda: F.batch_norm(x, gamma, beta, mm.copy(), mv.copy(), training, relu=relu)), [x, gamma, beta]


def case_batch_norm_relu(rng):
    return case_batch_norm(rng, relu=True)


def case_relu(rng):
    x = _leaf(_away_from_zero(rng, (2, 3, 4, 2)))
    return (lambda: F.relu(x)), [x]


def case_avg_pool(rng):
    pool = tuple(int(p) for p in rng.integers(1, 4, size=2))
    x = _leaf(rng.standard_normal((2, int(rng.integers(2, 8)), int(rng.integers(2, 8)), 2)))
    return (lambda: F.avg_pool2d(x, pool)), [x]


def case_gap(rng):
    x = _leaf(rng.standard_normal((2, int(rng.integers(1, 5)), int(rng.integers(1, 5)), 3)))
    return (lambda: F.global_avg_pool(x)), [x]


def case_dense(rng):
    d_in, d_out = rng.integers(1, 6, size=2)
    x = _leaf(rng.standard_normal((3, d_in)))
    w = _leaf(rng.standard_normal((d_in, d_out)))
    b = _leaf(rng.standard_normal(d_out))
    return (lambda: F.dense(x, w, b)), [x, w, b]


def case_dropout(rng):
    x = _leaf(rng.standard_normal((4, 5)))
    seed = int(rng.integers(0, 1 << 30))
    return (lambda: F.dropout(x, 0.3, np.random.default_rng(seed), True)), [x]


def case_concat(rng):
    a, b = _leaf(rng.standard_normal((2, 3, 1, 2))), _leaf(rng.standard_normal((2, 3, 1, 3)))
    return (lambda: F.concat([a, b])), [a, b]


def _loss_case(rng, loss):
    c = int(rng.integers(2, 6))
    z = _leaf(rng.standard_normal((4, c)) * 1.5)
    y = rng.integers(0, c, size=4)
    return (lambda: loss(F.softmax(z), y)), [z]


def case_softmax_ce(rng):
    return _loss_case(rng, cross_entropy)


def case_softmax_focal(rng):
    gamma = float(rng.choice([0.5, 1.0, 2.0, 3.0]))
    return _loss_case(rng, lambda p, y: focal_loss(p, y, gamma))


GRAD_CASES = {
    "conv2d": case_conv2d,
    "multi_conv2d": case_multi_conv2d,
    "batch_norm": case_batch_norm,
    "batch_norm_relu": case_batch_norm_relu,
    "relu": case_relu,
    "avg_pool2d": case_avg_pool,
    "global_avg_pool": case_gap,
    "dense": case_dense,
    "dropout": case_dropout,
    "concat": case_concat,
    "softmax_ce": case_softmax_ce,
    "softmax_focal": case_softmax_focal,
}


def gradcheck(case, rng, h=1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    Non-scalar outputs are reduced with a fixed random projection.
    """
    fn, leaves = case(rng)
    out = fn()
    proj = None if out.data.size == 1 else rng.standard_normal(out.shape)

    def scalar():
        o = fn()
        return float(o.data.sum()) if proj is None else float(np.sum(o.data * proj))

    (out if proj is None else (out * proj).sum()).backward()
    worst = 0.0
    for t in leaves:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        worst = max(worst, rel_error(analytic, numeric_grad(scalar, t.data, h)))
    return worst


def brute_metrics(counts):
    """UA, WA, macro-F1 by expanding a confusion matrix into samples and counting."""
    pairs = [(t, p) for t, row in enumerate(counts) for p, k in enumerate(row) for _ in range(int(k))]
    classes = range(len(counts))
    recalls, f1s = [], []
    for c in classes:
        tp = sum(1 for t, p in pairs if t == c and p == c)
        true_c = sum(1 for t, _ in pairs if t == c)
        pred_c = sum(1 for _, p in pairs if p == c)
        rec = tp / true_c if true_c else 0.0
        prec = tp / pred_c if pred_c else 0.0
        if true_c:
            recalls.append(rec)
        f1s.append(2 * prec * rec / (prec + rec) if prec + rec else 0.0)
    wa = sum(1 for t, p in pairs if t == p) / len(pairs)
    return sum(recalls) / len(recalls), wa, sum(f1s) / len(f1s)


def random_confusion(rng, max_classes=6):
    c = int(rng.integers(2, max_classes + 1))
    counts = rng.integers(0, 12, size=(c, c)) * (rng.random((c, c)) < 0.7)
    if counts.sum() == 0:
        counts[0, 0] = 1
    return counts
