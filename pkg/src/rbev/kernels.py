"""Hot numeric kernels with numba-jitted and pure-numpy implementations.

Every kernel here exists in two variants: a loop version compiled with
``numba.njit`` and a vectorized numpy fallback. The active variant is chosen
at import time: numba is used when it imports cleanly and the environment
variable ``RBEV_NO_NUMBA`` is unset/empty/"0". Both variants are always
importable (``*_nb`` may be None when numba is missing) so tests and
``benchmarks/bench_kernels.py`` can compare them directly.
"""

from __future__ import annotations

import math
import os

import numpy as np


def numba_requested() -> bool:
    return os.environ.get("RBEV_NO_NUMBA", "").strip() in ("", "0")


try:
    from numba import njit

    HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAS_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        if args and callable(args[0]):
            return args[0]
        return wrap


USE_NUMBA = HAS_NUMBA and numba_requested()


# ---------------------------------------------------------------------------
# bilinear sampling: gather 4-corner interpolated values, zero outside


def _bilinear_gather_loops(fmap, px, py, out):
    C, H, W = fmap.shape
    M = px.shape[0]
    for m in range(M):
        x = px[m]
        y = py[m]
        x0 = int(math.floor(x))
        y0 = int(math.floor(y))
        dx = x - x0
        dy = y - y0
        for c in range(C):
            acc = 0.0
            if 0 <= y0 < H and 0 <= x0 < W:
                acc += (1.0 - dx) * (1.0 - dy) * fmap[c, y0, x0]
            if 0 <= y0 < H and 0 <= x0 + 1 < W:
                acc += dx * (1.0 - dy) * fmap[c, y0, x0 + 1]
            if 0 <= y0 + 1 < H and 0 <= x0 < W:
                acc += (1.0 - dx) * dy * fmap[c, y0 + 1, x0]
            if 0 <= y0 + 1 < H and 0 <= x0 + 1 < W:
                acc += dx * dy * fmap[c, y0 + 1, x0 + 1]
            out[m, c] = acc
    return out


def _bilinear_gather_np(fmap, px, py, out):
    C, H, W = fmap.shape
    x0 = np.floor(px).astype(np.int64)
    y0 = np.floor(py).astype(np.int64)
    dx = px - x0
    dy = py - y0
    out[:] = 0.0
    flat = fmap.reshape(C, H * W)
    for oy, ox, w in (
        (0, 0, (1 - dx) * (1 - dy)),
        (0, 1, dx * (1 - dy)),
        (1, 0, (1 - dx) * dy),
        (1, 1, dx * dy),
    ):
        yy = y0 + oy
        xx = x0 + ox
        ok = (yy >= 0) & (yy < H) & (xx >= 0) & (xx < W)
        idx = np.where(ok, yy * W + xx, 0)
        vals = flat[:, idx].T  # [M, C]
        out += vals * (w * ok)[:, None]
    return out


def _bilinear_backward_loops(fmap, px, py, gout, gmap, gpx, gpy):
    C, H, W = fmap.shape
    M = px.shape[0]
    for m in range(M):
        x = px[m]
        y = py[m]
        x0 = int(math.floor(x))
        y0 = int(math.floor(y))
        dx = x - x0
        dy = y - y0
        gx = 0.0
        gy = 0.0
        for c in range(C):
            g = gout[m, c]
            v00 = 0.0
            v01 = 0.0
            v10 = 0.0
            v11 = 0.0
            if 0 <= y0 < H and 0 <= x0 < W:
                v00 = fmap[c, y0, x0]
                gmap[c, y0, x0] += g * (1.0 - dx) * (1.0 - dy)
            if 0 <= y0 < H and 0 <= x0 + 1 < W:
                v01 = fmap[c, y0, x0 + 1]
                gmap[c, y0, x0 + 1] += g * dx * (1.0 - dy)
            if 0 <= y0 + 1 < H and 0 <= x0 < W:
                v10 = fmap[c, y0 + 1, x0]
                gmap[c, y0 + 1, x0] += g * (1.0 - dx) * dy
            if 0 <= y0 + 1 < H and 0 <= x0 + 1 < W:
                v11 = fmap[c, y0 + 1, x0 + 1]
                gmap[c, y0 + 1, x0 + 1] += g * dx * dy
            gx += g * ((1.0 - dy) * (v01 - v00) + dy * (v11 - v10))
            gy += g * ((1.0 - dx) * (v10 - v00) + dx * (v11 - v01))
        gpx[m] = gx
        gpy[m] = gy
    return gmap


def _bilinear_backward_np(fmap, px, py, gout, gmap, gpx, gpy):
    C, H, W = fmap.shape
    x0 = np.floor(px).astype(np.int64)
    y0 = np.floor(py).astype(np.int64)
    dx = px - x0
    dy = py - y0
    flat = fmap.reshape(C, H * W)
    gflat = gmap.reshape(C, H * W)
    corners = {}
    for oy, ox in ((0, 0), (0, 1), (1, 0), (1, 1)):
        yy = y0 + oy
        xx = x0 + ox
        ok = (yy >= 0) & (yy < H) & (xx >= 0) & (xx < W)
        idx = np.where(ok, yy * W + xx, 0)
        corners[(oy, ox)] = (idx, ok, flat[:, idx].T * ok[:, None])
    w = {
        (0, 0): (1 - dx) * (1 - dy),
        (0, 1): dx * (1 - dy),
        (1, 0): (1 - dx) * dy,
        (1, 1): dx * dy,
    }
    for key, (idx, ok, _) in corners.items():
        if not ok.any():
            continue
        contrib = gout * (w[key] * ok)[:, None]  # [M, C]
        np.add.at(gflat, (slice(None), idx[ok]), contrib[ok].T)
    v00 = corners[(0, 0)][2]
    v01 = corners[(0, 1)][2]
    v10 = corners[(1, 0)][2]
    v11 = corners[(1, 1)][2]
    gpx[:] = np.sum(gout * ((1 - dy)[:, None] * (v01 - v00) + dy[:, None] * (v11 - v10)), axis=1)
    gpy[:] = np.sum(gout * ((1 - dx)[:, None] * (v10 - v00) + dx[:, None] * (v11 - v01)), axis=1)
    return gmap


# ---------------------------------------------------------------------------
# scatter-add of row blocks (backward of row gather)


def _scatter_add_rows_loops(target, idx, src):
    M, C = src.shape
    for m in range(M):
        r = idx[m]
        for c in range(C):
            target[r, c] += src[m, c]
    return target


def _scatter_add_rows_np(target, idx, src):
    np.add.at(target, idx, src)
    return target


# ---------------------------------------------------------------------------
# separable blur along the last axis; input must already be reflect-padded


def _blur_axis_loops(padded, weights, out):
    H, Wp = padded.shape
    K = weights.shape[0]
    W = Wp - K + 1
    for i in range(H):
        for j in range(W):
            acc = 0.0
            for k in range(K):
                acc += weights[k] * padded[i, j + k]
            out[i, j] = acc
    return out


def _blur_axis_np(padded, weights, out):
    K = weights.shape[0]
    W = padded.shape[1] - K + 1
    out[:] = 0.0
    for k in range(K):
        out += weights[k] * padded[:, k : k + W]
    return out


# ---------------------------------------------------------------------------
# rotated-rectangle footprint painting into a class-index grid


def _paint_rects_loops(class_grid, xs, ys, half_l, half_w, yaw, labels, x_min, y_min, dx, dy):
    H, W = class_grid.shape
    n = xs.shape[0]
    for a in range(n):
        c = math.cos(yaw[a])
        s = math.sin(yaw[a])
        reach = math.sqrt(half_l[a] * half_l[a] + half_w[a] * half_w[a])
        c0 = max(0, int((xs[a] - reach - x_min) / dx))
        c1 = min(W - 1, int((xs[a] + reach - x_min) / dx))
        r0 = max(0, int((ys[a] - reach - y_min) / dy))
        r1 = min(H - 1, int((ys[a] + reach - y_min) / dy))
        for r in range(r0, r1 + 1):
            py = y_min + (r + 0.5) * dy - ys[a]
            for q in range(c0, c1 + 1):
                px = x_min + (q + 0.5) * dx - xs[a]
                u = c * px + s * py
                v = -s * px + c * py
                if abs(u) <= half_l[a] and abs(v) <= half_w[a]:
                    class_grid[r, q] = labels[a]
    return class_grid


def _paint_rects_np(class_grid, xs, ys, half_l, half_w, yaw, labels, x_min, y_min, dx, dy):
    H, W = class_grid.shape
    cx = x_min + (np.arange(W) + 0.5) * dx
    cy = y_min + (np.arange(H) + 0.5) * dy
    gx, gy = np.meshgrid(cx, cy)
    for a in range(xs.shape[0]):
        px = gx - xs[a]
        py = gy - ys[a]
        c = math.cos(yaw[a])
        s = math.sin(yaw[a])
        u = c * px + s * py
        v = -s * px + c * py
        inside = (np.abs(u) <= half_l[a]) & (np.abs(v) <= half_w[a])
        class_grid[inside] = labels[a]
    return class_grid


# ---------------------------------------------------------------------------
# convex polygon fill (vertices in CCW order) into an image


def _fill_convex_polygon_loops(img, poly_x, poly_y, value):
    H, W = img.shape
    n = poly_x.shape[0]
    x_lo = max(0, int(math.floor(np.min(poly_x))))
    x_hi = min(W - 1, int(math.ceil(np.max(poly_x))))
    y_lo = max(0, int(math.floor(np.min(poly_y))))
    y_hi = min(H - 1, int(math.ceil(np.max(poly_y))))
    for y in range(y_lo, y_hi + 1):
        for x in range(x_lo, x_hi + 1):
            inside = True
            for k in range(n):
                x1 = poly_x[k]
                y1 = poly_y[k]
                x2 = poly_x[(k + 1) % n]
                y2 = poly_y[(k + 1) % n]
                cross = (x2 - x1) * (y - y1) - (y2 - y1) * (x - x1)
                if cross < 0.0:
                    inside = False
                    break
            if inside:
                img[y, x] = value
    return img


def _fill_convex_polygon_np(img, poly_x, poly_y, value):
    H, W = img.shape
    x_lo = max(0, int(math.floor(poly_x.min())))
    x_hi = min(W - 1, int(math.ceil(poly_x.max())))
    y_lo = max(0, int(math.floor(poly_y.min())))
    y_hi = min(H - 1, int(math.ceil(poly_y.max())))
    if x_lo > x_hi or y_lo > y_hi:
        return img
    gx, gy = np.meshgrid(np.arange(x_lo, x_hi + 1), np.arange(y_lo, y_hi + 1))
    inside = np.ones(gx.shape, dtype=bool)
    n = poly_x.shape[0]
    for k in range(n):
        x1, y1 = poly_x[k], poly_y[k]
        x2, y2 = poly_x[(k + 1) % n], poly_y[(k + 1) % n]
        cross = (x2 - x1) * (gy - y1) - (y2 - y1) * (gx - x1)
        inside &= cross >= 0.0
    region = img[y_lo : y_hi + 1, x_lo : x_hi + 1]
    region[inside] = value
    return img


if HAS_NUMBA:
    bilinear_gather_nb = njit(cache=True)(_bilinear_gather_loops)
    bilinear_backward_nb = njit(cache=True)(_bilinear_backward_loops)
    scatter_add_rows_nb = njit(cache=True)(_scatter_add_rows_loops)
    blur_axis_nb = njit(cache=True)(_blur_axis_loops)
    paint_rects_nb = njit(cache=True)(_paint_rects_loops)
    fill_convex_polygon_nb = njit(cache=True)(_fill_convex_polygon_loops)
else:  # pragma: no cover
    bilinear_gather_nb = None
    bilinear_backward_nb = None
    scatter_add_rows_nb = None
    blur_axis_nb = None
    paint_rects_nb = None
    fill_convex_polygon_nb = None

bilinear_gather_np = _bilinear_gather_np
bilinear_backward_np = _bilinear_backward_np
scatter_add_rows_np = _scatter_add_rows_np
blur_axis_np = _blur_axis_np
paint_rects_np = _paint_rects_np
fill_convex_polygon_np = _fill_convex_polygon_np

if USE_NUMBA:
    bilinear_gather = bilinear_gather_nb
    bilinear_backward = bilinear_backward_nb
    scatter_add_rows = scatter_add_rows_nb
    blur_axis = blur_axis_nb
    paint_rects = paint_rects_nb
    fill_convex_polygon = fill_convex_polygon_nb
else:
    bilinear_gather = bilinear_gather_np
    bilinear_backward = bilinear_backward_np
    scatter_add_rows = scatter_add_rows_np
    blur_axis = blur_axis_np
    paint_rects = paint_rects_np
    fill_convex_polygon = fill_convex_polygon_np

BACKEND = "numba" if USE_NUMBA else "numpy"
