"""Compiled coordinate-descent kernels.

Columns of ``X`` are expected in Fortran order so that a column scan is
contiguous. All kernels release the GIL.
"""

import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def weighted_cd(X, r, w, beta, b0, work, penalized, v, lam, tol, max_sweeps):
    """Cyclic coordinate descent on a weighted least-squares lasso.

    Minimizes ``(1/2n) sum_i w_i (z_i - b0 - x_i beta)^2 + lam * sum_pen |beta_j|``
    over the coordinates listed in ``work`` and the intercept. ``r`` holds the
    unweighted working residual ``z - b0 - X beta`` and is updated in place,
    as is ``beta``.

    Returns
    -------
    b0 : float
    sweeps : int
    converged : bool
    """
    n = X.shape[0]
    sw = 0.0
    for i in range(n):
        sw += w[i]
    for sweep in range(max_sweeps):
        maxdiff = 0.0
        for jj in range(work.shape[0]):
            j = work[jj]
            vj = v[j]
            if vj <= 0.0:
                continue
            g = 0.0
            for i in range(n):
                g += w[i] * X[i, j] * r[i]
            old = beta[j]
            z = g / n + vj * old
            if penalized[j]:
                if z > lam:
                    new = (z - lam) / vj
                elif z < -lam:
                    new = (z + lam) / vj
                else:
                    new = 0.0
            else:
                new = z / vj
            if new != old:
                d = new - old
                for i in range(n):
                    r[i] -= d * X[i, j]
                beta[j] = new
                if abs(d) > maxdiff:
                    maxdiff = abs(d)
        s = 0.0
        for i in range(n):
            s += w[i] * r[i]
        d0 = s / sw
        if d0 != 0.0:
            b0 += d0
            for i in range(n):
                r[i] -= d0
            if abs(d0) > maxdiff:
                maxdiff = abs(d0)
        if maxdiff < tol:
            return b0, sweep + 1, True
    return b0, max_sweeps, False


@njit(cache=True, nogil=True)
def weighted_col_sq(X, w, cols):
    """``sum_i w_i x_ij^2 / n`` for each column index in ``cols``."""
    n = X.shape[0]
    out = np.zeros(X.shape[1])
    for jj in range(cols.shape[0]):
        j = cols[jj]
        s = 0.0
        for i in range(n):
            s += w[i] * X[i, j] * X[i, j]
        out[j] = s / n
    return out
