"""Hot numeric kernels.

Each kernel has a numba ``@njit`` version and a pure-numpy version with the
same contract. Setting ``PROMPTRL_DISABLE_NUMBA=1`` (or running where numba
cannot be imported) selects the numpy path at import time.
"""
import os

import numpy as np

_disabled = os.environ.get("PROMPTRL_DISABLE_NUMBA", "").strip().lower() in ("1", "true", "yes")

try:
    if _disabled:
        raise ImportError("disabled by PROMPTRL_DISABLE_NUMBA")
    from numba import njit
    HAVE_NUMBA = True
except ImportError:
    HAVE_NUMBA = False


def lcs_length_numpy(a: np.ndarray, b: np.ndarray) -> int:
    # row i of the DP table is the running max of max(prev[j], prev[j-1] + match)
    if len(a) == 0 or len(b) == 0:
        return 0
    if len(b) > len(a):
        a, b = b, a
    prev = np.zeros(len(b) + 1, dtype=np.int64)
    cand = np.empty(len(b), dtype=np.int64)
    for x in a:
        np.maximum(prev[1:], prev[:-1] + (b == x), out=cand)
        prev[1:] = np.maximum.accumulate(cand)
    return int(prev[-1])


def _lcs_length_loops(a, b):
    n = a.shape[0]
    m = b.shape[0]
    if n == 0 or m == 0:
        return 0
    prev = np.zeros(m + 1, dtype=np.int64)
    cur = np.zeros(m + 1, dtype=np.int64)
    for i in range(n):
        ai = a[i]
        for j in range(m):
            if ai == b[j]:
                cur[j + 1] = prev[j] + 1
            elif prev[j + 1] >= cur[j]:
                cur[j + 1] = prev[j + 1]
            else:
                cur[j + 1] = cur[j]
        for j in range(m + 1):
            prev[j] = cur[j]
    return prev[m]


def window_sum_numpy(emb: np.ndarray, width: int) -> tuple[np.ndarray, np.ndarray]:
    """Sum of rows in [i-width, i+width] (clipped) and the count per row."""
    n = emb.shape[0]
    csum = np.zeros((n + 1, emb.shape[1]), dtype=emb.dtype)
    np.cumsum(emb, axis=0, out=csum[1:])
    idx = np.arange(n)
    lo = np.maximum(idx - width, 0)
    hi = np.minimum(idx + width + 1, n)
    return csum[hi] - csum[lo], (hi - lo)


if HAVE_NUMBA:
    lcs_length_numba = njit(cache=True, nogil=True)(_lcs_length_loops)

    def lcs_length(a: np.ndarray, b: np.ndarray) -> int:
        return int(lcs_length_numba(a, b))

    BACKEND = "numba"
else:
    lcs_length_numba = None
    lcs_length = lcs_length_numpy
    BACKEND = "numpy"
