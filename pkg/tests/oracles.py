"""Independent reference implementations used by the tests.

These deliberately avoid the package's own code paths: plain loops, direct
formulas, or a different mechanism (coordinate ramps) for the same quantity.
"""

import math

import numpy as np

from lcssl.imaging import resample


def bilerp(img, x, y):
    x0, y0 = int(math.floor(x)), int(math.floor(y))
    tx, ty = x - x0, y - y0
    x1, y1 = min(x0 + 1, img.shape[1] - 1), min(y0 + 1, img.shape[0] - 1)
    return ((1 - ty) * ((1 - tx) * img[y0, x0] + tx * img[y0, x1])
            + ty * ((1 - tx) * img[y1, x0] + tx * img[y1, x1]))


def ramp_track_error(spec_c, spec_sc, geom, corr):
    """Max disagreement (feature units) between ``corr`` and ramp tracking.

    Coordinate ramps go through the real resampler: view c tells where each
    grid point sits in the source; view sc, which is affine in the source,
    is inverted from two interior samples per axis.
    """
    h, w = spec_c.src_size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    src = np.stack([xx, yy], -1)
    view_c = resample(src, spec_c)
    view_sc = resample(src, spec_sc)
    H, W = spec_sc.out_size
    ax, bx, ay, by = W // 4, 3 * W // 4, H // 4, 3 * H // 4
    sx_a, sx_b = view_sc[H // 2, ax, 0], view_sc[H // 2, bx, 0]
    sy_a, sy_b = view_sc[ay, W // 2, 1], view_sc[by, W // 2, 1]
    err = 0.0
    for idx, (u, v) in zip(corr.index_c, corr.coords_sc):
        i, j = divmod(int(idx), geom.w)
        x, y = geom.cell_center(i, j)
        sx, sy = bilerp(view_c, x, y)
        xv = ax + (sx - sx_a) * (bx - ax) / (sx_b - sx_a)
        yv = ay + (sy - sy_a) * (by - ay) / (sy_b - sy_a)
        fu, fv = geom.pixel_to_feature(xv, yv)
        err = max(err, abs(fu - u), abs(fv - v))
    return err


def softmax_nll_row(row, tau):
    """Direct ``-log softmax`` in Python floats, no shifting."""
    exps = [math.exp(c / tau) for c in row]
    s = sum(exps)
    return [-math.log(e / s) for e in exps]


def cosine(a, b):
    na = math.sqrt(sum(x * x for x in a)) + 1e-8
    nb = math.sqrt(sum(x * x for x in b)) + 1e-8
    return sum(x * y for x, y in zip(a, b)) / (na * nb)


def bilinear_value(grid, u, v):
    """Bilinear interpolation of a 2-D list/array at (u, v) with clamped neighbors."""
    g = np.asarray(grid, dtype=float)
    return float(bilerp(g, u, v))


def brute_feature_warp(f_c, f_sc, index_c, coords, tau):
    """Feature-warp local loss for one image with explicit loops.

    ``f_c``/``f_sc`` are ``(d, h, w)`` numpy arrays.
    """
    d, h, w = f_c.shape
    anchors = []
    warped = []
    for idx, (u, v) in zip(index_c, coords):
        i, j = divmod(int(idx), w)
        anchors.append(f_c[:, i, j])
        warped.append(np.array([bilinear_value(f_sc[k], u, v) for k in range(d)]))
    total = 0.0
    for a, anchor in enumerate(anchors):
        row = [cosine(anchor, wv) for wv in warped]
        total += softmax_nll_row(row, tau)[a]
    return total / len(anchors)


def brute_nll_warp(f_c, f_sc, index_c, coords, tau):
    d, h, w = f_c.shape
    total = 0.0
    for idx, (u, v) in zip(index_c, coords):
        i, j = divmod(int(idx), w)
        anchor = f_c[:, i, j]
        row = [cosine(anchor, f_sc[:, k // w, k % w]) for k in range(h * w)]
        nll = np.array(softmax_nll_row(row, tau)).reshape(h, w)
        total += bilinear_value(nll, u, v)
    return total / len(index_c)


def brute_mse(f_c, f_sc, index_c, coords):
    d, h, w = f_c.shape
    total = 0.0
    for idx, (u, v) in zip(index_c, coords):
        i, j = divmod(int(idx), w)
        wv = [bilinear_value(f_sc[k], u, v) for k in range(d)]
        total += 2.0 - 2.0 * cosine(f_c[:, i, j], wv)
    return total / len(index_c)
