"""LPC feature extraction over sliding half-stride windows."""

from __future__ import annotations

import numpy as np

from .audio import Sample
from .kernels import lpc_average, window_count

DEFAULT_WINDOW_LEN = 128
DEFAULT_POLES = 20


class SampleTooShort(ValueError):
    """Not even one full analysis window fits."""


def lpc_features(sample: Sample, window_len: int = DEFAULT_WINDOW_LEN,
                 poles: int = DEFAULT_POLES) -> np.ndarray:
    """Feature vector of length *poles*: per-window Hamming + autocorrelation +
    Levinson-Durbin coefficients, averaged across all windows."""
    if window_len < 2 or window_len % 2 != 0:
        raise ValueError("window_len must be an even integer >= 2")
    if not 0 < poles < window_len:
        raise ValueError("poles must satisfy 0 < poles < window_len")
    data = np.asarray(sample.data, dtype=np.float64)
    if window_count(len(data), window_len) < 1:
        raise SampleTooShort(
            "need at least %d samples, got %d" % (window_len, len(data)))
    return lpc_average(data, window_len, poles)
