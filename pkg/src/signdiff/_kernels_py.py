"""Pure-Python twins of the compiled kernels in ``_kernels.pyx``."""
import numpy as np


def dtw_accumulate(cost):
    """Minimum-sum monotone warping path through ``cost``; ties prefer longer paths.

    Returns (path_sum, path_length).
    """
    cost = np.ascontiguousarray(cost, dtype=np.float64)
    n, m = cost.shape
    if n == 0 or m == 0:
        raise ValueError("empty cost matrix")
    c = cost.tolist()
    acc = [[0.0] * m for _ in range(n)]
    ln = [[0] * m for _ in range(n)]
    acc[0][0] = c[0][0]
    ln[0][0] = 1
    for j in range(1, m):
        acc[0][j] = acc[0][j - 1] + c[0][j]
        ln[0][j] = ln[0][j - 1] + 1
    for i in range(1, n):
        prev, cur = acc[i - 1], acc[i]
        lprev, lcur = ln[i - 1], ln[i]
        row = c[i]
        cur[0] = prev[0] + row[0]
        lcur[0] = lprev[0] + 1
        for j in range(1, m):
            best, blen = prev[j - 1], lprev[j - 1]
            cand, clen = prev[j], lprev[j]
            if cand < best or (cand == best and clen > blen):
                best, blen = cand, clen
            cand, clen = cur[j - 1], lcur[j - 1]
            if cand < best or (cand == best and clen > blen):
                best, blen = cand, clen
            cur[j] = best + row[j]
            lcur[j] = blen + 1
    return acc[n - 1][m - 1], ln[n - 1][m - 1]
