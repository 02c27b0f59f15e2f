"""Hot numeric kernels for feature extraction.

The per-window work (Hamming taper, autocorrelation lags, Levinson-Durbin
recursion) dominates the workload's compute, so it is compiled with numba
when available. Set ``EDGRID_PURE_NUMPY=1`` to force the vectorized numpy
implementation instead (also used automatically if numba cannot be
imported). ``benchmarks/bench_lpc.py`` compares the two.

Both backends implement the same math: slide windows of ``window_len`` at
half-window stride starting from offset zero, taper each with a Hamming
window, take autocorrelation lags 0..poles, run the Levinson-Durbin
recursion, and average the coefficient vectors over all windows. An
all-zero window contributes zero coefficients rather than failing on the
r[0] = 0 singularity.
"""

from __future__ import annotations

import os

import numpy as np

__all__ = ["lpc_average", "lpc_average_numpy", "active_backend", "window_count"]


def window_count(n_samples: int, window_len: int) -> int:
    """How many full windows fit at half-window stride."""
    half = window_len // 2
    if n_samples < window_len:
        return 0
    return (n_samples - window_len) // half + 1


def _hamming_taper(window_len: int) -> np.ndarray:
    n = np.arange(window_len, dtype=np.float64)
    return 0.54 - 0.46 * np.cos(2.0 * np.pi * n / (window_len - 1))


# -- pure numpy backend ------------------------------------------------------


def lpc_average_numpy(data: np.ndarray, window_len: int, poles: int) -> np.ndarray:
    """Vectorized across windows: one autocorrelation matmul per lag, then a
    Levinson-Durbin recursion carried for all windows at once."""
    data = np.ascontiguousarray(data, dtype=np.float64)
    half = window_len // 2
    count = window_count(len(data), window_len)
    stride = data.strides[0]
    windows = np.lib.stride_tricks.as_strided(
        data, shape=(count, window_len), strides=(half * stride, stride)).copy()
    windows *= _hamming_taper(window_len)

    lags = np.empty((count, poles + 1))
    for k in range(poles + 1):
        lags[:, k] = np.einsum("wi,wi->w", windows[:, k:], windows[:, : window_len - k])

    coeffs = np.zeros((count, poles))
    err = lags[:, 0].copy()
    for i in range(1, poles + 1):
        acc = lags[:, i].copy()
        for j in range(1, i):
            acc -= coeffs[:, j - 1] * lags[:, i - j]
        k = np.where(err != 0.0, acc / np.where(err != 0.0, err, 1.0), 0.0)
        updated = coeffs.copy()
        updated[:, i - 1] = k
        for j in range(1, i):
            updated[:, j - 1] = coeffs[:, j - 1] - k * coeffs[:, i - 1 - j]
        coeffs = updated
        err *= 1.0 - k * k
    return coeffs.sum(axis=0) / count


# -- numba backend -----------------------------------------------------------


def _lpc_average_loops(data, window_len, poles):  # compiled by numba below
    half = window_len // 2
    count = (data.shape[0] - window_len) // half + 1
    taper = np.empty(window_len)
    for j in range(window_len):
        taper[j] = 0.54 - 0.46 * np.cos(2.0 * np.pi * j / (window_len - 1))
    total = np.zeros(poles)
    frame = np.empty(window_len)
    lags = np.empty(poles + 1)
    coeffs = np.zeros(poles)
    updated = np.zeros(poles)
    for w in range(count):
        start = w * half
        for j in range(window_len):
            frame[j] = data[start + j] * taper[j]
        for k in range(poles + 1):
            acc = 0.0
            for i in range(k, window_len):
                acc += frame[i] * frame[i - k]
            lags[k] = acc
        for j in range(poles):
            coeffs[j] = 0.0
        err = lags[0]
        for i in range(1, poles + 1):
            acc = lags[i]
            for j in range(1, i):
                acc -= coeffs[j - 1] * lags[i - j]
            k = acc / err if err != 0.0 else 0.0
            for j in range(poles):
                updated[j] = coeffs[j]
            updated[i - 1] = k
            for j in range(1, i):
                updated[j - 1] = coeffs[j - 1] - k * coeffs[i - 1 - j]
            for j in range(poles):
                coeffs[j] = updated[j]
            err *= 1.0 - k * k
        for j in range(poles):
            total[j] += coeffs[j]
    return total / count


_FORCE_NUMPY = os.environ.get("EDGRID_PURE_NUMPY", "") not in ("", "0")

if not _FORCE_NUMPY:
    try:
        from numba import njit

        lpc_average_numba = njit(
            "f8[:](f8[:], i8, i8)", cache=True, nogil=True)(_lpc_average_loops)
        _ACTIVE = "numba"
    except ImportError:
        lpc_average_numba = None
        _ACTIVE = "numpy"
else:
    lpc_average_numba = None
    _ACTIVE = "numpy"


def active_backend() -> str:
    return _ACTIVE


def lpc_average(data: np.ndarray, window_len: int, poles: int) -> np.ndarray:
    """Averaged LPC coefficient vector over all windows, on the active backend."""
    data = np.ascontiguousarray(data, dtype=np.float64)
    if _ACTIVE == "numba":
        return lpc_average_numba(data, window_len, poles)
    return lpc_average_numpy(data, window_len, poles)


def warm_up():
    """Trigger JIT compilation outside any timed region."""
    lpc_average(np.zeros(16, dtype=np.float64), 8, 2)
