"""Hot inner loops of the DSP path: biquad cascades, image-source room
responses and windowed-sinc interpolation.

Every kernel exists twice: a ``@njit`` loop and a numpy/scipy equivalent.
The public entry points dispatch on :data:`astspoof._accel.USE_NUMBA`; the
``*_numba`` / ``*_numpy`` names are exported so the two paths can be checked
against each other.
"""

import math
from functools import lru_cache

import numpy as np
from scipy import signal

from . import _accel
from ._accel import njit

# ---------------------------------------------------------------------------
# biquad cascade (transposed direct form II)
# ---------------------------------------------------------------------------


@njit
def _sosfilt_loop(sos, x):
    n_sec = sos.shape[0]
    y = x.copy()
    for s in range(n_sec):
        b0 = sos[s, 0]
        b1 = sos[s, 1]
        b2 = sos[s, 2]
        a1 = sos[s, 4]
        a2 = sos[s, 5]
        z1 = 0.0
        z2 = 0.0
        for i in range(y.shape[0]):
            xi = y[i]
            yi = b0 * xi + z1
            z1 = b1 * xi - a1 * yi + z2
            z2 = b2 * xi - a2 * yi
            y[i] = yi
    return y


def sosfilt_numba(sos, x):
    return _sosfilt_loop(np.ascontiguousarray(sos, dtype=np.float64),
                         np.ascontiguousarray(x, dtype=np.float64))


def sosfilt_numpy(sos, x):
    return signal.sosfilt(np.asarray(sos, dtype=np.float64),
                          np.asarray(x, dtype=np.float64))


def sosfilt(sos, x):
    """Filter ``x`` through second-order sections ``sos`` (rows b0 b1 b2 1 a1 a2)."""
    if _accel.USE_NUMBA:
        return sosfilt_numba(sos, x)
    return sosfilt_numpy(sos, x)


# ---------------------------------------------------------------------------
# image-source room impulse response
# ---------------------------------------------------------------------------


@njit
def _image_coord(n, length, s):
    if n % 2 == 0:
        return n * length + s
    return (n + 1) * length - s


@njit
def _rir_loop(room, src, mic, beta, order, fs, c, n_taps):
    h = np.zeros(n_taps)
    direct = math.sqrt((src[0] - mic[0]) ** 2 + (src[1] - mic[1]) ** 2
                       + (src[2] - mic[2]) ** 2)
    d_ref = max(direct, c / fs)
    for nx in range(-order, order + 1):
        ix = _image_coord(nx, room[0], src[0]) - mic[0]
        for ny in range(-order, order + 1):
            iy = _image_coord(ny, room[1], src[1]) - mic[1]
            for nz in range(-order, order + 1):
                k = abs(nx) + abs(ny) + abs(nz)
                if k > order:
                    continue
                iz = _image_coord(nz, room[2], src[2]) - mic[2]
                d = math.sqrt(ix * ix + iy * iy + iz * iz)
                tap = int(math.floor(d / c * fs + 0.5))
                if tap >= n_taps:
                    continue
                h[tap] += beta ** k * d_ref / max(d, d_ref)
    return h


def rir_numba(room, src, mic, beta, order, fs, c, n_taps):
    return _rir_loop(np.asarray(room, np.float64), np.asarray(src, np.float64),
                     np.asarray(mic, np.float64), float(beta), int(order),
                     float(fs), float(c), int(n_taps))


def rir_numpy(room, src, mic, beta, order, fs, c, n_taps):
    room = np.asarray(room, np.float64)
    src = np.asarray(src, np.float64)
    mic = np.asarray(mic, np.float64)
    n = np.arange(-order, order + 1)
    nx, ny, nz = np.meshgrid(n, n, n, indexing="ij")
    k = np.abs(nx) + np.abs(ny) + np.abs(nz)
    keep = k <= order
    grid = np.stack([nx[keep], ny[keep], nz[keep]], axis=1)
    even = grid % 2 == 0
    img = np.where(even, grid * room + src, (grid + 1) * room - src)
    d = np.sqrt(((img - mic) ** 2).sum(axis=1))
    d_ref = max(float(np.sqrt(((src - mic) ** 2).sum())), c / fs)
    taps = np.floor(d / c * fs + 0.5).astype(np.int64)
    amp = float(beta) ** k[keep] * d_ref / np.maximum(d, d_ref)
    inside = taps < n_taps
    h = np.zeros(int(n_taps))
    np.add.at(h, taps[inside], amp[inside])
    return h


def image_source_rir(room, src, mic, beta, order, fs, c, n_taps):
    """Impulse response of a shoebox room, normalized so the direct path is 1.

    ``beta`` is the per-wall amplitude reflection coefficient; images up to
    ``order`` total reflections are summed at the nearest sample.
    """
    if _accel.USE_NUMBA:
        return rir_numba(room, src, mic, beta, order, fs, c, n_taps)
    return rir_numpy(room, src, mic, beta, order, fs, c, n_taps)


# ---------------------------------------------------------------------------
# windowed-sinc interpolation
# ---------------------------------------------------------------------------


# Kaiser window sampled on v = |offset| / reach in [0, 1]; linear
# interpolation between entries is accurate to ~1e-8, far below 16-bit audio.
_WINDOW_POINTS = 16384


@lru_cache(maxsize=4)
def kaiser_table(beta: float) -> np.ndarray:
    v = np.linspace(0.0, 1.0, _WINDOW_POINTS + 1)
    table = np.i0(beta * np.sqrt(np.clip(1.0 - v * v, 0.0, None))) / np.i0(beta)
    table = np.append(table, 0.0)  # guard entry for v == 1
    table.setflags(write=False)
    return table


@njit
def _sinc_resample_loop(x, ratio, n_out, half_width, rolloff, table):
    fc = min(1.0, ratio) * rolloff
    reach = half_width / fc
    n_pts = table.shape[0] - 2
    n_in = x.shape[0]
    y = np.zeros(n_out)
    for m in range(n_out):
        t = m / ratio
        lo = max(0, int(math.ceil(t - reach)))
        hi = min(n_in - 1, int(math.floor(t + reach)))
        acc = 0.0
        for k in range(lo, hi + 1):
            u = t - k
            pos = abs(u) / reach * n_pts
            i = int(pos)
            frac = pos - i
            w = table[i] + frac * (table[i + 1] - table[i])
            arg = math.pi * fc * u
            s = 1.0 if arg == 0.0 else math.sin(arg) / arg
            acc += x[k] * fc * s * w
        y[m] = acc
    return y


def sinc_resample_numba(x, ratio, n_out, half_width=32, beta=8.0, rolloff=0.95):
    return _sinc_resample_loop(np.ascontiguousarray(x, dtype=np.float64),
                               float(ratio), int(n_out), float(half_width),
                               float(rolloff), kaiser_table(float(beta)))


def sinc_resample_numpy(x, ratio, n_out, half_width=32, beta=8.0, rolloff=0.95,
                        chunk=2048):
    x = np.asarray(x, dtype=np.float64)
    table = kaiser_table(float(beta))
    n_pts = table.shape[0] - 2
    fc = min(1.0, ratio) * rolloff
    reach = half_width / fc
    span = int(math.ceil(reach)) + 1
    offsets = np.arange(-span, span + 1)
    y = np.zeros(int(n_out))
    for start in range(0, int(n_out), chunk):
        m = np.arange(start, min(start + chunk, int(n_out)))
        t = m / ratio
        k = np.floor(t)[:, None].astype(np.int64) + offsets[None, :]
        u = t[:, None] - k
        valid = (k >= 0) & (k < x.shape[0]) & (np.abs(u) <= reach)
        pos = np.minimum(np.abs(u) / reach, 1.0) * n_pts
        i = pos.astype(np.int64)
        w = table[i] + (pos - i) * (table[i + 1] - table[i])
        taps = fc * np.sinc(fc * u) * w * valid
        y[m] = (x[np.clip(k, 0, x.shape[0] - 1)] * taps).sum(axis=1)
    return y


def sinc_resample(x, ratio, n_out, half_width=32, beta=8.0, rolloff=0.95):
    """Band-limited resampling of ``x`` by ``ratio`` (output rate / input rate)."""
    if _accel.USE_NUMBA:
        return sinc_resample_numba(x, ratio, n_out, half_width, beta, rolloff)
    return sinc_resample_numpy(x, ratio, n_out, half_width, beta, rolloff)


# ---------------------------------------------------------------------------
# patch extraction
# ---------------------------------------------------------------------------


@njit
def _patch_loop(data, n_t, n_f, size, stride):
    out = np.empty((n_t * n_f, size * size), data.dtype)
    for t in range(n_t):
        for i in range(size):
            src = data[t * stride + i]
            for f in range(n_f):
                dst = out[t * n_f + f]
                o = i * size
                b = f * stride
                for j in range(size):
                    dst[o + j] = src[b + j]
    return out


def patches_numba(data, n_t, n_f, size, stride):
    return _patch_loop(np.ascontiguousarray(data), int(n_t), int(n_f), int(size), int(stride))


def patches_numpy(data, n_t, n_f, size, stride):
    data = np.asarray(data)
    if n_t == 0 or n_f == 0:
        return np.zeros((0, size * size), dtype=data.dtype)
    win = np.lib.stride_tricks.sliding_window_view(data, (size, size))
    grid = win[: (n_t - 1) * stride + 1: stride, : (n_f - 1) * stride + 1: stride]
    return np.ascontiguousarray(grid.reshape(n_t * n_f, size * size))


def extract_patches(data, n_t, n_f, size, stride):
    """``n_t * n_f`` flattened ``size``-square windows, time-major."""
    if _accel.USE_NUMBA:
        return patches_numba(data, n_t, n_f, size, stride)
    return patches_numpy(data, n_t, n_f, size, stride)
