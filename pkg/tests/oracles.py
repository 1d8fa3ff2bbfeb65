"""Brute-force reference implementations used as test oracles.

Everything here is plain numpy / Python loops in float64 (mpmath for the
relativistic losses) and shares no code with the package's vectorised paths.
"""

import math

import mpmath
import numpy as np


def conv2d_loop(x, w, b, dilation=1):
    """Zero-padded 'same' convolution, x [C, H, W], w [O, C, k, k]."""
    c, h, wd = x.shape
    o, _, k, _ = w.shape
    pad = dilation * (k // 2)
    xp = np.zeros((c, h + 2 * pad, wd + 2 * pad))
    xp[:, pad:pad + h, pad:pad + wd] = x
    out = np.zeros((o, h, wd))
    for i in range(k):
        for j in range(k):
            patch = xp[:, i * dilation:i * dilation + h, j * dilation:j * dilation + wd]
            out += np.einsum("oc,chw->ohw", w[:, :, i, j], patch)
    return out + b[:, None, None]


def instance_norm_loop(x, eps=1e-5):
    out = np.empty_like(x)
    for ch in range(x.shape[0]):
        plane = x[ch]
        mu = plane.sum() / plane.size
        var = ((plane - mu) ** 2).sum() / plane.size
        out[ch] = (plane - mu) / math.sqrt(var + eps)
    return out


def relu(x):
    return np.maximum(x, 0)


def dmfb_loop(params, x, dilations=(1, 2, 4, 8)):
    """Full DMFB on one sample x [256, H, W]; params maps module names to numpy arrays."""

    def unit(prefix, t, d=1):
        return relu(instance_norm_loop(conv2d_loop(t, params[prefix + ".0.weight"], params[prefix + ".0.bias"], d)))

    r = unit("reduce", x)
    xs = [unit(f"branches.{i}", r, d) for i, d in enumerate(dilations)]
    ys = [None] * 4
    ys[0] = xs[0]
    ys[1] = unit("combine.0", xs[0] + xs[1])
    for i in (2, 3):
        ys[i] = unit(f"combine.{i - 1}", ys[i - 1] + xs[i])
    cat = relu(instance_norm_loop(np.concatenate(ys, axis=0)))
    fused = instance_norm_loop(conv2d_loop(cat, params["fuse.0.weight"], params["fuse.0.bias"]))
    return x + fused


def error_map_loop(out, gt, kind="l2", sigma=1.0):
    n, c, h, w = out.shape
    res = np.zeros((n, 1, h, w))
    for a in range(n):
        for i in range(h):
            for j in range(w):
                xs, ys = out[a, :, i, j], gt[a, :, i, j]
                if kind == "l2":
                    res[a, 0, i, j] = sum((xs[k] - ys[k]) ** 2 for k in range(c)) / 3
                elif kind == "gaussian":
                    res[a, 0, i, j] = math.exp(-sum((xs[k] - ys[k]) ** 2 for k in range(c)) / (2 * sigma ** 2))
                else:
                    res[a, 0, i, j] = sum(xs[k] * ys[k] for k in range(c))
    return res


def normalize_loop(err, eps=1e-8):
    res = np.zeros_like(err)
    for a in range(err.shape[0]):
        vals = err[a].ravel().tolist()
        lo, hi = min(vals), max(vals)
        for idx in np.ndindex(err[a].shape):
            res[a][idx] = (err[a][idx] - lo) / (hi - lo + eps)
    return res


def avgpool2_loop(m):
    n, c, h, w = m.shape
    res = np.zeros((n, c, h // 2, w // 2))
    for a in range(n):
        for ch in range(c):
            for i in range(h // 2):
                for j in range(w // 2):
                    res[a, ch, i, j] = (m[a, ch, 2 * i, 2 * j] + m[a, ch, 2 * i + 1, 2 * j]
                                        + m[a, ch, 2 * i, 2 * j + 1] + m[a, ch, 2 * i + 1, 2 * j + 1]) / 4
    return res


def weighted_l1_loop(guides, outs, gts):
    total = 0.0
    for m, o, g in zip(guides, outs, gts):
        n, c, h, w = g.shape
        acc = 0.0
        for idx in np.ndindex(g.shape):
            weight = 1.0 if m is None else m[idx[0], 0, idx[2], idx[3]]
            acc += abs(weight * (g[idx] - o[idx]))
        total += (1000.0 / c ** 2) * acc / g.size
    return total


def centers_loop(resp):
    n, k, h, w = resp.shape
    res = np.zeros((n, k, 2))
    for a in range(n):
        for ch in range(k):
            mass = 0.0
            su = sv = 0.0
            for u in range(h):
                for v in range(w):
                    r = resp[a, ch, u, v]
                    mass += r
                    su += u * r
                    sv += v * r
            if mass > 1e-12:
                res[a, ch] = (su / mass, sv / mass)
            else:
                res[a, ch] = ((h - 1) / 2, (w - 1) / 2)
    return res


def alignment_loop(out_resp, gt_resp):
    co, cg = centers_loop(out_resp), centers_loop(gt_resp)
    per_sample = []
    for a in range(co.shape[0]):
        per_sample.append(sum((co[a, k, 0] - cg[a, k, 0]) ** 2 + (co[a, k, 1] - cg[a, k, 1]) ** 2
                              for k in range(co.shape[1])))
    return sum(per_sample) / len(per_sample)


def _mp_log_sigmoid(z):
    return -mpmath.log(1 + mpmath.exp(-z))


def ragan_loop(real, fake, side="g"):
    with mpmath.workdps(50):
        real = [mpmath.mpf(float(v)) for v in real]
        fake = [mpmath.mpf(float(v)) for v in fake]
        mr, mf = mpmath.fsum(real) / len(real), mpmath.fsum(fake) / len(fake)
        if side == "g":
            t1 = -mpmath.fsum(_mp_log_sigmoid(-(r - mf)) for r in real) / len(real)
            t2 = -mpmath.fsum(_mp_log_sigmoid(f - mr) for f in fake) / len(fake)
        else:
            t1 = -mpmath.fsum(_mp_log_sigmoid(r - mf) for r in real) / len(real)
            t2 = -mpmath.fsum(_mp_log_sigmoid(-(f - mr)) for f in fake) / len(fake)
        return float(t1 + t2)


def mae_loop(out, gt):
    acc = 0.0
    for idx in np.ndindex(out.shape):
        acc += abs(out[idx] - gt[idx])
    return acc / out.size


def central_difference(f, x, eps):
    """Numerical gradient of scalar f at numpy array x."""
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        orig = x[idx]
        x[idx] = orig + eps
        fp = f(x)
        x[idx] = orig - eps
        fm = f(x)
        x[idx] = orig
        grad[idx] = (fp - fm) / (2 * eps)
    return grad


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a.ravel()), np.linalg.norm(b.ravel()), 1e-30)
    return float(np.linalg.norm((a - b).ravel()) / denom)
