"""Hot numeric kernels with optional numba acceleration.

Each kernel has two implementations: an explicit-loop form compiled with
``@njit`` and a vectorized pure-numpy form. The ``IHCMIL_NUMBA`` environment
variable (set to ``0``/``false``/``off``/``no`` to disable) selects which one
the public names point at; both produce identical results and a unit test
pins them together. ``mil_bag_step`` is written once in the numba-compatible
numpy subset, which is already vectorized, so it serves both paths.

``benchmarks/bench_kernels.py`` compares the two paths.
"""

from __future__ import annotations

import os

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None


def _flag_enabled() -> bool:
    raw = os.environ.get("IHCMIL_NUMBA", "1").strip().lower()
    return raw not in ("0", "false", "off", "no")


NUMBA_ENABLED = numba is not None and _flag_enabled()


def maybe_njit(fn):
    """Compile with numba when enabled, otherwise return ``fn`` unchanged."""
    if NUMBA_ENABLED:
        return numba.njit(cache=True)(fn)
    return fn


# ------------------------------------------------------------- loop forms


def _luminance_histogram_loops(pixels):
    h, w = pixels.shape[0], pixels.shape[1]
    lum = np.empty((h, w), dtype=np.uint8)
    hist = np.zeros(256, dtype=np.int64)
    for i in range(h):
        for j in range(w):
            v = (
                0.299 * pixels[i, j, 0]
                + 0.587 * pixels[i, j, 1]
                + 0.114 * pixels[i, j, 2]
            )
            q = int(np.round(v))
            if q > 255:
                q = 255
            lum[i, j] = q
            hist[q] += 1
    return lum, hist


def _tile_tissue_counts_loops(mask, tile_size, ny, nx):
    counts = np.zeros((ny, nx), dtype=np.int64)
    h, w = mask.shape[0], mask.shape[1]
    for i in range(h):
        gy = i // tile_size
        for j in range(w):
            if mask[i, j]:
                counts[gy, j // tile_size] += 1
    return counts


def _stamp_disks_loops(img, cx, cy, radius, colors):
    h, w = img.shape[0], img.shape[1]
    for n in range(cx.shape[0]):
        r = radius[n]
        r2 = r * r
        x0, y0 = cx[n], cy[n]
        for dy in range(-r, r + 1):
            y = y0 + dy
            if y < 0 or y >= h:
                continue
            for dx in range(-r, r + 1):
                if dx * dx + dy * dy > r2:
                    continue
                x = x0 + dx
                if x < 0 or x >= w:
                    continue
                img[y, x, 0] = colors[n, 0]
                img[y, x, 1] = colors[n, 1]
                img[y, x, 2] = colors[n, 2]


def _fill_ellipses_loops(canvas, cx, cy, ax, ay, value):
    h, w = canvas.shape[0], canvas.shape[1]
    for n in range(cx.shape[0]):
        x0, y0 = cx[n], cy[n]
        a, b = ax[n], ay[n]
        ylo = max(0, int(y0 - b))
        yhi = min(h - 1, int(y0 + b))
        xlo = max(0, int(x0 - a))
        xhi = min(w - 1, int(x0 + a))
        for y in range(ylo, yhi + 1):
            fy = (y - y0) / b
            for x in range(xlo, xhi + 1):
                fx = (x - x0) / a
                if fx * fx + fy * fy <= 1.0:
                    canvas[y, x] = value


# ------------------------------------------------------- vectorized forms


def _luminance_histogram_numpy(pixels):
    arr = pixels.astype(np.float64)
    v = 0.299 * arr[..., 0] + 0.587 * arr[..., 1] + 0.114 * arr[..., 2]
    lum = np.minimum(np.round(v), 255.0).astype(np.uint8)
    hist = np.bincount(lum.ravel(), minlength=256).astype(np.int64)
    return lum, hist


def _tile_tissue_counts_numpy(mask, tile_size, ny, nx):
    padded = np.zeros((ny * tile_size, nx * tile_size), dtype=np.int64)
    padded[: mask.shape[0], : mask.shape[1]] = mask != 0
    return padded.reshape(ny, tile_size, nx, tile_size).sum(axis=(1, 3))


def _stamp_disks_numpy(img, cx, cy, radius, colors):
    h, w = img.shape[0], img.shape[1]
    for n in range(cx.shape[0]):
        r = int(radius[n])
        x0, y0 = int(cx[n]), int(cy[n])
        ylo, yhi = max(0, y0 - r), min(h - 1, y0 + r)
        xlo, xhi = max(0, x0 - r), min(w - 1, x0 + r)
        if ylo > yhi or xlo > xhi:
            continue
        yy = np.arange(ylo, yhi + 1)[:, None] - y0
        xx = np.arange(xlo, xhi + 1)[None, :] - x0
        inside = xx * xx + yy * yy <= r * r
        img[ylo : yhi + 1, xlo : xhi + 1][inside] = colors[n]


def _fill_ellipses_numpy(canvas, cx, cy, ax, ay, value):
    h, w = canvas.shape[0], canvas.shape[1]
    for n in range(cx.shape[0]):
        x0, y0, a, b = cx[n], cy[n], ax[n], ay[n]
        ylo = max(0, int(y0 - b))
        yhi = min(h - 1, int(y0 + b))
        xlo = max(0, int(x0 - a))
        xhi = min(w - 1, int(x0 + a))
        if ylo > yhi or xlo > xhi:
            continue
        fy = (np.arange(ylo, yhi + 1)[:, None] - y0) / b
        fx = (np.arange(xlo, xhi + 1)[None, :] - x0) / a
        inside = fx * fx + fy * fy <= 1.0
        canvas[ylo : yhi + 1, xlo : xhi + 1][inside] = value


# --------------------------------------------------------- fused MIL step


@maybe_njit
def mil_bag_step(X, W1T, b1, W2T, b2, VT, w_att, u, c, y, weight):
    """Fused forward + backward for one bag under weighted BCE.

    Shapes: X (K, d); W1T (d, h1); W2T (h1, h2); VT (h2, L); w_att (L,);
    u (h2,); scalars c, y, weight. Returns
    (p, a, gW1, gb1, gW2, gb2, gV, gw, gu, gc) with gradients oriented like
    the un-transposed parameter arrays (gW1 is (h1, d) etc.).

    The math mirrors ``mil.forward`` / ``mil.backward`` exactly; a unit test
    pins the two paths together.
    """
    K = X.shape[0]
    # forward
    Z1 = np.dot(X, W1T) + b1
    H1 = np.maximum(Z1, 0.0)
    Z2 = np.dot(H1, W2T) + b2
    H2 = np.maximum(Z2, 0.0)
    T = np.tanh(np.dot(H2, VT))
    e = np.dot(T, w_att)
    e = e - np.max(e)
    a = np.exp(e)
    a = a / np.sum(a)
    z = np.dot(a, H2)
    s = np.dot(u, z) + c
    p = 1.0 / (1.0 + np.exp(-s))

    # weighted BCE with probability clamp; gradient is zero when the clamp
    # is active, matching the loss actually evaluated
    eps = 1e-7
    if p <= eps or p >= 1.0 - eps:
        ds = 0.0
    else:
        ds = weight * (p - y)

    gc = ds
    gu = ds * z
    dz = ds * u
    da = np.dot(H2, dz)
    dH2 = a.reshape(K, 1) * dz.reshape(1, -1)
    de = a * (da - np.dot(a, da))
    gw = np.dot(de, T)  # (L,) since T is (K, L): de @ T
    dT = de.reshape(K, 1) * w_att.reshape(1, -1)
    dPre = dT * (1.0 - T * T)
    gV = np.dot(np.ascontiguousarray(dPre.T), H2)
    dH2 = dH2 + np.dot(dPre, np.ascontiguousarray(VT.T))
    dZ2 = dH2 * (Z2 > 0.0)
    gW2 = np.dot(np.ascontiguousarray(dZ2.T), H1)
    gb2 = np.sum(dZ2, axis=0)
    dH1 = np.dot(dZ2, np.ascontiguousarray(W2T.T))
    dZ1 = dH1 * (Z1 > 0.0)
    gW1 = np.dot(np.ascontiguousarray(dZ1.T), X)
    gb1 = np.sum(dZ1, axis=0)
    return p, a, gW1, gb1, gW2, gb2, gV, gw, gu, gc


# ------------------------------------------------------- path selection


if NUMBA_ENABLED:
    luminance_histogram = numba.njit(cache=True)(_luminance_histogram_loops)
    tile_tissue_counts = numba.njit(cache=True)(_tile_tissue_counts_loops)
    stamp_disks = numba.njit(cache=True)(_stamp_disks_loops)
    fill_ellipses = numba.njit(cache=True)(_fill_ellipses_loops)
else:
    luminance_histogram = _luminance_histogram_numpy
    tile_tissue_counts = _tile_tissue_counts_numpy
    stamp_disks = _stamp_disks_numpy
    fill_ellipses = _fill_ellipses_numpy


def warmup() -> None:
    """Trigger JIT compilation of every kernel on tiny inputs."""
    img = np.zeros((4, 4, 3), dtype=np.uint8)
    luminance_histogram(img)
    tile_tissue_counts(np.zeros((4, 4), dtype=np.uint8), 2, 2, 2)
    stamp_disks(
        img,
        np.array([1], dtype=np.int64),
        np.array([1], dtype=np.int64),
        np.array([1], dtype=np.int64),
        np.array([[1, 2, 3]], dtype=np.uint8),
    )
    fill_ellipses(
        np.zeros((4, 4), dtype=np.uint8),
        np.array([2.0]),
        np.array([2.0]),
        np.array([1.5]),
        np.array([1.5]),
        1,
    )
    X = np.ones((2, 3))
    mil_bag_step(
        X,
        np.ones((3, 4)),
        np.zeros(4),
        np.ones((4, 4)),
        np.zeros(4),
        np.ones((4, 2)),
        np.ones(2),
        np.ones(4),
        0.0,
        1.0,
        1.0,
    )
