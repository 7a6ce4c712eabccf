"""Jitted streaming kernel for the inference-mode block forward.

Kept separate so the package degrades gracefully to the numpy path when
numba is missing. All loops are per-sample sequential: results never depend
on how the batch is chunked across workers.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def gnap_infer_kernel(x, a_in, b_in, eps_norm, a_out, b_out, out):
    """x is (n, c, p); writes the (n, c) embedding into out.

    Two passes per sample: accumulate per-position norm of a_in*x + b_in,
    then pool with the mean-norm ratio, folding the exit affine in.
    """
    n, c, p = x.shape
    for i in range(n):
        normsq = np.zeros(p)
        for ch in range(c):
            av = a_in[ch]
            bv = b_in[ch]
            for q in range(p):
                v = av * x[i, ch, q] + bv
                normsq[q] += v * v
        mean = 0.0
        norms = np.empty(p)
        for q in range(p):
            norms[q] = np.sqrt(normsq[q])
            mean += norms[q]
        mean /= p
        ratio = np.empty(p)
        ratio_sum = 0.0
        for q in range(p):
            ratio[q] = mean / (norms[q] + eps_norm)
            ratio_sum += ratio[q]
        for ch in range(c):
            acc = 0.0
            for q in range(p):
                acc += ratio[q] * x[i, ch, q]
            pooled = (a_in[ch] * acc + b_in[ch] * ratio_sum) / p
            out[i, ch] = a_out[ch] * pooled + b_out[ch]
