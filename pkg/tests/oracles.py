"""Loop-based reference implementations shared by the test modules.

These are deliberately slow and literal so they can serve as oracles for
the vectorised kernels.
"""
import math

import numpy as np


def conv_loops(x, w, b=None, stride=1, pad=0, groups=1):
    n, c, h, wd = x.shape
    cout, cg, kh, kw = w.shape
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad : pad + h, pad : pad + wd] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, cout, ho, wo))
    per = cout // groups
    for i in range(n):
        for o in range(cout):
            g = o // per
            for yy in range(ho):
                for xx in range(wo):
                    acc = 0.0
                    for ci in range(cg):
                        for u in range(kh):
                            for v in range(kw):
                                acc += w[o, ci, u, v] * xp[i, g * cg + ci, yy * stride + u, xx * stride + v]
                    out[i, o, yy, xx] = acc + (0.0 if b is None else b[o])
    return out


def bilinear_at(plane, y, x):
    """Zero-padded bilinear read of a 2-D plane at fractional (y, x)."""
    h, w = plane.shape
    y0, x0 = math.floor(y), math.floor(x)
    total = 0.0
    for yi, wy in ((y0, 1 - (y - y0)), (y0 + 1, y - y0)):
        for xi, wx in ((x0, 1 - (x - x0)), (x0 + 1, x - x0)):
            if 0 <= yi < h and 0 <= xi < w:
                total += wy * wx * plane[yi, xi]
    return total


def deform_loops(x, offsets, w, b, groups):
    n, c, h, wd = x.shape
    cout, cg, k, _ = w.shape
    r = k // 2
    off = offsets.reshape(n, groups, k * k, 3, h, wd)
    per = cout // groups
    out = np.zeros((n, cout, h, wd))
    for i in range(n):
        for o in range(cout):
            g = o // per
            for yy in range(h):
                for xx in range(wd):
                    acc = 0.0
                    for p in range(k * k):
                        u, v = divmod(p, k)
                        dx, dy, dm = off[i, g, p, :, yy, xx]
                        for ci in range(cg):
                            s = bilinear_at(x[i, g * cg + ci], yy + u - r + dy, xx + v - r + dx)
                            acc += w[o, ci, u, v] * dm * s
                    out[i, o, yy, xx] = acc + (0.0 if b is None else b[o])
    return out


def resize_src(i, n_in, n_out):
    """Half-pixel source coordinate, clamped to the valid range."""
    return min(max((i + 0.5) * n_in / n_out - 0.5, 0.0), n_in - 1)


def resize_loops(x, oh, ow):
    n, c, h, w = x.shape
    out = np.zeros((n, c, oh, ow))
    for yy in range(oh):
        sy = resize_src(yy, h, oh)
        y0 = int(math.floor(sy))
        y1 = min(y0 + 1, h - 1)
        fy = sy - y0
        for xx in range(ow):
            sx = resize_src(xx, w, ow)
            x0 = int(math.floor(sx))
            x1 = min(x0 + 1, w - 1)
            fx = sx - x0
            out[:, :, yy, xx] = ((1 - fy) * (1 - fx) * x[:, :, y0, x0] + (1 - fy) * fx * x[:, :, y0, x1]
                                 + fy * (1 - fx) * x[:, :, y1, x0] + fy * fx * x[:, :, y1, x1])
    return out


def two_pass_norm(v, eps=1e-5):
    """Standardise a flat sample with a separate mean pass and variance pass."""
    v = [float(t) for t in np.ravel(v)]
    mu = math.fsum(v) / len(v)
    var = math.fsum((t - mu) ** 2 for t in v) / len(v)
    return (np.asarray(v) - mu) / math.sqrt(var + eps)
