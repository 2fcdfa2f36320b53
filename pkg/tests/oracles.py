"""Brute-force float64 loop oracles, written independently of the package code."""
import numpy as np


def conv2d_loop(x, w, b=None, stride=1):
    """Direct 'same'-padded cross-correlation, no activation."""
    cout, cin, k, _ = w.shape
    _, h, wd = x.shape
    p = k // 2
    ho, wo = -(-h // stride), -(-wd // stride)
    y = np.zeros((cout, ho, wo))
    for o in range(cout):
        for i in range(ho):
            for j in range(wo):
                acc = 0.0 if b is None else float(b[o])
                for c in range(cin):
                    for a in range(k):
                        for bb in range(k):
                            r, s = i * stride + a - p, j * stride + bb - p
                            if 0 <= r < h and 0 <= s < wd:
                                acc += w[o, c, a, bb] * x[c, r, s]
                y[o, i, j] = acc
    return y


def sparse_conv_loop(x, m, w, b=None, stride=1):
    """Normalized convolution: masked window sum over the valid count, bias where valid."""
    cout, cin, k, _ = w.shape
    _, h, wd = x.shape
    p = k // 2
    ho, wo = -(-h // stride), -(-wd // stride)
    y = np.zeros((cout, ho, wo))
    mo = np.zeros((1, ho, wo))
    for i in range(ho):
        for j in range(wo):
            count = 0.0
            for a in range(k):
                for bb in range(k):
                    r, s = i * stride + a - p, j * stride + bb - p
                    if 0 <= r < h and 0 <= s < wd:
                        count += m[0, r, s]
            if count == 0:
                continue
            mo[0, i, j] = 1
            for o in range(cout):
                acc = 0.0
                for c in range(cin):
                    for a in range(k):
                        for bb in range(k):
                            r, s = i * stride + a - p, j * stride + bb - p
                            if 0 <= r < h and 0 <= s < wd:
                                acc += w[o, c, a, bb] * x[c, r, s] * m[0, r, s]
                y[o, i, j] = acc / count + (0.0 if b is None else b[o])
    return y, mo


def sparse_pool_loop(x, m):
    c, h, w = x.shape
    ho, wo = -(-h // 2), -(-w // 2)
    y = np.zeros((c, ho, wo))
    mo = np.zeros((1, ho, wo))
    for i in range(ho):
        for j in range(wo):
            vals, count = np.zeros(c), 0.0
            for a in range(3):
                for bb in range(3):
                    r, s = 2 * i + a - 1, 2 * j + bb - 1
                    if 0 <= r < h and 0 <= s < w and m[0, r, s] > 0:
                        vals += x[:, r, s]
                        count += 1
            if count:
                y[:, i, j] = vals / count
                mo[0, i, j] = 1
    return y, mo


def propagate_loop(x, m, off, k=3):
    """Single-channel-at-a-time spatially variant propagation.

    ``off`` is [groups*(k*k-1), H, W]; a group per channel or one shared group.
    """
    c, h, w = x.shape
    groups = off.shape[0] // (k * k - 1)
    r = k // 2
    y = np.zeros((c, h, w))
    mo = np.zeros((1, h, w))
    for ch in range(c):
        g = 0 if groups == 1 else ch
        for i in range(h):
            for j in range(w):
                count = acc = 0.0
                n = 0
                for a in range(k):
                    for bb in range(k):
                        if a == r and bb == r:
                            weight = 1.0
                        else:
                            weight = off[g * (k * k - 1) + n, i, j]
                            n += 1
                        rr, ss = i + a - r, j + bb - r
                        if 0 <= rr < h and 0 <= ss < w:
                            count += m[0, rr, ss]
                            acc += weight * x[ch, rr, ss] * m[0, rr, ss]
                if count > 0:
                    y[ch, i, j] = acc / count
                    mo[0, i, j] = 1
    return y, mo


def stabilized_filter_loop(x, raw, iterations, k=3):
    """Convex refinement with replicate borders; raw is [C*(k*k-1), H, W]."""
    c, h, w = x.shape
    r = k // 2
    x = x.astype(np.float64).copy()
    for _ in range(iterations):
        y = np.zeros_like(x)
        for ch in range(c):
            for i in range(h):
                for j in range(w):
                    a = np.abs(raw[ch * (k * k - 1):(ch + 1) * (k * k - 1), i, j])
                    s = 1.0 + a.sum()
                    total = x[ch, i, j] / s
                    n = 0
                    for da in range(k):
                        for db in range(k):
                            if da == r and db == r:
                                continue
                            rr = min(max(i + da - r, 0), h - 1)
                            ss = min(max(j + db - r, 0), w - 1)
                            total += a[n] / s * x[ch, rr, ss]
                            n += 1
                    y[ch, i, j] = total
        x = y
    return x


def epe_loop(pred, gt, mask):
    total, n = 0.0, 0
    for i in range(gt.shape[1]):
        for j in range(gt.shape[2]):
            if mask[0, i, j] > 0:
                total += np.sqrt(sum((pred[c, i, j] - gt[c, i, j]) ** 2 for c in range(gt.shape[0])))
                n += 1
    return total / n


def mae_rmse_loop(pred, gt, mask):
    sa = sq = 0.0
    n = 0
    for c in range(gt.shape[0]):
        for i in range(gt.shape[1]):
            for j in range(gt.shape[2]):
                if mask[0, i, j] > 0:
                    d = pred[c, i, j] - gt[c, i, j]
                    sa += abs(d)
                    sq += d * d
                    n += 1
    return sa / n, np.sqrt(sq / n)


def koe_loop(pred, gt, mask):
    bad = n = 0
    for i in range(gt.shape[1]):
        for j in range(gt.shape[2]):
            if mask[0, i, j] > 0:
                e = np.sqrt(((pred[:, i, j] - gt[:, i, j]) ** 2).sum())
                g = np.sqrt((gt[:, i, j] ** 2).sum())
                bad += int(e > 3 and e > 0.05 * g)
                n += 1
    return 100.0 * bad / n
