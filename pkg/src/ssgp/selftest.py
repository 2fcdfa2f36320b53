"""Self-contained oracle and gradient checks run by ``ssgp selftest``.

Each check returns ``(name, passed, detail)``. The oracles are plain Python
loops in float64, independent of the vectorized implementations.
"""
from __future__ import annotations

from typing import Callable

import numpy as np

from .evaluation import metric_koe
from .gradcheck import grad_check
from .ops import conv2d, conv2d_transpose
from .propagation import AffinityField, propagate, spatial_filter, stability_transform
from .sparse import MaskedFeature, sparse_avg_pool, sparse_conv2d
from .tensor import Tensor
from .training import loss_epe, loss_mse


def _fixture(rng, c, h, w, density=0.4):
    x = rng.standard_normal((c, h, w))
    m = (rng.random((1, h, w)) < density).astype(np.float64)
    return x, m


def loop_sparse_conv(x, m, wt, b, stride):
    cout, cin, k, _ = wt.shape
    _, h, w = x.shape
    p = k // 2
    ho, wo = -(-h // stride), -(-w // stride)
    y = np.zeros((cout, ho, wo))
    mo = np.zeros((1, ho, wo))
    for i in range(ho):
        for j in range(wo):
            cnt = 0.0
            acc = np.zeros(cout)
            for a in range(k):
                for bb in range(k):
                    r, s = i * stride + a - p, j * stride + bb - p
                    if 0 <= r < h and 0 <= s < w:
                        cnt += m[0, r, s]
                        acc += wt[:, :, a, bb] @ (x[:, r, s] * m[0, r, s])
            if cnt > 0:
                y[:, i, j] = acc / cnt + b
                mo[0, i, j] = 1
    return y, mo


def loop_pool(x, m):
    c, h, w = x.shape
    ho, wo = -(-h // 2), -(-w // 2)
    y = np.zeros((c, ho, wo))
    for i in range(ho):
        for j in range(wo):
            cnt, acc = 0.0, np.zeros(c)
            for a in range(3):
                for b in range(3):
                    r, s = 2 * i + a - 1, 2 * j + b - 1
                    if 0 <= r < h and 0 <= s < w:
                        cnt += m[0, r, s]
                        acc += x[:, r, s] * m[0, r, s]
            if cnt > 0:
                y[:, i, j] = acc / cnt
    return y


def loop_propagate(x, m, kern):
    """``kern``: [groups, 9, H, W] full kernels with the center included."""
    c, h, w = x.shape
    y = np.zeros((c, h, w))
    for ch in range(c):
        g = 0 if kern.shape[0] == 1 else ch
        for i in range(h):
            for j in range(w):
                cnt = acc = 0.0
                for n in range(9):
                    r, s = i + n // 3 - 1, j + n % 3 - 1
                    if 0 <= r < h and 0 <= s < w:
                        cnt += m[0, r, s]
                        acc += kern[g, n, i, j] * x[ch, r, s] * m[0, r, s]
                if cnt > 0:
                    y[ch, i, j] = acc / cnt
    return y


def _check_sparse_conv(rng):
    err = 0.0
    for _ in range(20):
        c, h, w = rng.integers(1, 5), rng.integers(1, 9), rng.integers(1, 9)
        k, stride = int(rng.choice([1, 3])), int(rng.choice([1, 2]))
        cout = int(rng.integers(1, 5))
        x, m = _fixture(rng, c, h, w)
        wt, b = rng.standard_normal((cout, c, k, k)), rng.standard_normal(cout)
        out = sparse_conv2d(MaskedFeature(Tensor(x), Tensor(m)), Tensor(wt), Tensor(b),
                            stride=stride, linear=True)
        y, mo = loop_sparse_conv(x, m, wt, b, stride)
        err = max(err, np.abs(out.features.data - y).max(), np.abs(out.mask.data - mo).max())
    return err < 1e-5, f"max abs error {err:.2e}"


def _check_pool(rng):
    err = 0.0
    for _ in range(20):
        x, m = _fixture(rng, int(rng.integers(1, 5)), int(rng.integers(1, 9)), int(rng.integers(1, 9)))
        out = sparse_avg_pool(MaskedFeature(Tensor(x), Tensor(m)))
        err = max(err, np.abs(out.features.data - loop_pool(x, m)).max())
    return err < 1e-5, f"max abs error {err:.2e}"


def _check_propagate(rng):
    err = 0.0
    for _ in range(20):
        c, h, w = int(rng.integers(1, 5)), int(rng.integers(1, 9)), int(rng.integers(1, 9))
        groups = int(rng.choice([1, c]))
        x, m = _fixture(rng, c, h, w)
        off = rng.standard_normal((groups, 8, h, w))
        kern = np.insert(off, 4, 1.0, axis=1)
        out = propagate(MaskedFeature(Tensor(x), Tensor(m)),
                        AffinityField(Tensor(off.reshape(groups * 8, h, w))))
        err = max(err, np.abs(out.features.data - loop_propagate(x, m, kern)).max())
    return err < 1e-5, f"max abs error {err:.2e}"


def _check_adjoint(rng):
    x = rng.standard_normal((3, 5, 6))
    wt = rng.standard_normal((4, 3, 3, 3))
    y = rng.standard_normal((4, 3, 3))
    fwd = conv2d(Tensor(x), Tensor(wt), stride=2, linear=True).data
    back = conv2d_transpose(Tensor(y), Tensor(wt)).data[:, :5, :6]
    lhs, rhs = float((fwd * y).sum()), float((x * back).sum())
    err = abs(lhs - rhs) / max(abs(lhs), 1e-12)
    return err < 1e-10, f"relative mismatch {err:.2e}"


def _check_gradients(rng):
    worst = 0.0
    x, m = _fixture(rng, 3, 6, 6, 0.6)
    mask = Tensor(m)
    xt = Tensor(x)
    cases: list[tuple[Callable, list]] = [
        (lambda a, wt, b: conv2d(a, wt, b, stride=2),
         [xt, Tensor(rng.standard_normal((2, 3, 3, 3))), Tensor(rng.standard_normal(2))]),
        (lambda a, wt: conv2d_transpose(a, wt), [xt, Tensor(rng.standard_normal((3, 2, 3, 3)))]),
        (lambda a, wt: sparse_conv2d(MaskedFeature(a, mask), wt, linear=True).features,
         [xt, Tensor(rng.standard_normal((2, 3, 3, 3)))]),
        (lambda a: sparse_avg_pool(MaskedFeature(a, mask)).features, [xt]),
        (lambda a, k: propagate(MaskedFeature(a, mask), AffinityField(k)).features,
         [xt, Tensor(rng.standard_normal((8, 6, 6)))]),
        (lambda a, k: spatial_filter(a, stability_transform(AffinityField(k))),
         [xt, Tensor(rng.standard_normal((24, 6, 6)) + 0.5)]),
        (lambda a: loss_epe(a, np.zeros((3, 6, 6)), m), [Tensor(x + 2.0)]),
        (lambda a: loss_mse(a, np.zeros((3, 6, 6)), m), [xt]),
    ]
    for fn, inputs in cases:
        worst = max(worst, grad_check(fn, inputs, tolerance=1e-4).max_rel_error)
    return worst <= 1e-4, f"worst relative error {worst:.2e}"


def _check_refinement(rng):
    x = Tensor(rng.standard_normal((2, 7, 7)))
    zero = stability_transform(AffinityField(Tensor(np.zeros((16, 7, 7)))))
    ident = np.array_equal(spatial_filter(x, zero).data, x.data)
    stab = stability_transform(AffinityField(Tensor(rng.standard_normal((16, 7, 7)) * 3)))
    bound = float(np.abs(stab.weights.data).sum(axis=1).max())
    y = spatial_filter(x, stab).data
    contractive = np.abs(y).max() <= np.abs(x.data).max() * (1 + 1e-6)
    ok = ident and bound <= 1 + 1e-6 and contractive
    return ok, f"identity={ident} weight-sum={bound:.6f} non-expansive={contractive}"


def _check_koe():
    gt = np.zeros((2, 4, 4))
    gt[0] = 10
    pred = gt.copy()
    pred[0, :2] = 14
    m = np.ones((1, 4, 4))
    a = metric_koe(pred, gt, m)
    gt2 = gt.copy()
    gt2[0] = 100
    pred2 = gt2 + np.array([4.0, 0.0])[:, None, None]
    b = metric_koe(pred2, gt2, m)
    return a == 50.0 and b == 0.0, f"koe cases {a}%, {b}%"


def run_all(seed: int = 0) -> list[tuple[str, bool, str]]:
    rng = np.random.default_rng(seed)
    checks = [
        ("sparse_conv2d oracle", lambda: _check_sparse_conv(rng)),
        ("sparse_avg_pool oracle", lambda: _check_pool(rng)),
        ("propagation oracle", lambda: _check_propagate(rng)),
        ("transposed conv adjoint", lambda: _check_adjoint(rng)),
        ("op gradients", lambda: _check_gradients(rng)),
        ("refinement properties", lambda: _check_refinement(rng)),
        ("koe and-rule", _check_koe),
    ]
    results = []
    for name, fn in checks:
        try:
            ok, detail = fn()
        except Exception as exc:  # a crash is a failure, not an abort
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append((name, bool(ok), detail))
    return results
