"""Compiled inner loop: region-local losses of every factor for every joint particle.

Arrays use a padded grid index (two zero points on each side of the
spectrum) so derivative stencils never need bounds checks. Each cluster's
signature is tabulated on a shift lattice of ``substeps`` positions per grid
step; table row ``p`` holds the signature for sub-step phase ``p`` and is
indexed by ``i - qi - jbase`` where ``qi`` is the whole-step part of the
lattice index.
"""

import numpy as np
from numba import njit, prange

# no reassociation: every particle's reduction runs in a fixed order whatever
# the thread count or vector width
_FLAGS = {"nnan", "ninf", "nsz", "arcp", "contract", "afn"}


@njit(parallel=True, fastmath=_FLAGS, cache=True)
def factor_losses(s, K, f_lo, f_hi, f_ptr, f_cl, cl_conc, cl_off, cl_rowlen, cl_jbase,
                  substeps, tables, conc, q, out, chunk):
    """Fill ``out[f, n]`` with the loss of factor ``f`` under joint particle ``n``.

    Parameters
    ----------
    s, K : padded observed spectrum (n+4) and loss coefficients (4, n+4)
    f_lo, f_hi : owned padded index range of each factor
    f_ptr, f_cl : CSR list of table-cluster indices per factor
    cl_conc : row of ``conc`` holding each cluster's compound concentration
    cl_off, cl_rowlen, cl_jbase : table layout per cluster
    conc : (M, N) concentration particles
    q : (C, N) shift lattice indices
    """
    K0 = K[0]
    K1 = K[1]
    K2 = K[2]
    K3 = K[3]
    n_f = f_lo.size
    n_p = conc.shape[1]
    maxlen = 0
    for f in range(n_f):
        if f_hi[f] - f_lo[f] + 4 > maxlen:
            maxlen = f_hi[f] - f_lo[f] + 4
    n_chunks = (n_p + chunk - 1) // chunk
    for c in prange(n_chunks):
        buf = np.empty(maxlen)
        term = np.empty(maxlen)
        stop = min(n_p, (c + 1) * chunk)
        for n in range(c * chunk, stop):
            for f in range(n_f):
                lo = f_lo[f] - 2
                length = f_hi[f] - f_lo[f] + 4
                m = length - 4
                src = s[lo:lo + length]
                for i in range(length):
                    buf[i] = src[i]
                for k in range(f_ptr[f], f_ptr[f + 1]):
                    cl = f_cl[k]
                    x = conc[cl_conc[cl], n]
                    if x == 0.0:
                        continue
                    qq = q[cl, n]
                    qi = qq // substeps
                    p = qq - qi * substeps
                    base = cl_off[cl] + p * cl_rowlen[cl] + (lo - qi - cl_jbase[cl])
                    sig = tables[base:base + length]
                    for i in range(length):
                        buf[i] -= x * sig[i]
                # shifted views keep the stencil loop free of index arithmetic
                b0 = buf[0:m]
                b1 = buf[1:m + 1]
                b2 = buf[2:m + 2]
                b3 = buf[3:m + 3]
                b4 = buf[4:m + 4]
                k0 = K0[lo + 2:lo + 2 + m]
                k1 = K1[lo + 2:lo + 2 + m]
                k2 = K2[lo + 2:lo + 2 + m]
                k3 = K3[lo + 2:lo + 2 + m]
                for j in range(m):
                    r = b2[j]
                    d1 = 0.5 * (b3[j] - b1[j])
                    d2 = b3[j] - 2.0 * r + b1[j]
                    d3 = 0.5 * (b4[j] - 2.0 * b3[j] + 2.0 * b1[j] - b0[j])
                    term[j] = k0[j] * r * r + k1[j] * d1 * d1 + k2[j] * d2 * d2 + k3[j] * d3 * d3
                # four interleaved partial sums in a fixed combination order
                a0 = 0.0
                a1 = 0.0
                a2 = 0.0
                a3 = 0.0
                j = 0
                while j + 3 < m:
                    a0 += term[j]
                    a1 += term[j + 1]
                    a2 += term[j + 2]
                    a3 += term[j + 3]
                    j += 4
                while j < m:
                    a0 += term[j]
                    j += 1
                out[f, n] = (a0 + a1) + (a2 + a3)
    return out


@njit(cache=True)
def support_ratios(shifts, y, s, inc, amp, off, wid, cut, reach_lo, reach_hi):
    """Smallest ``s / signature`` over included points where the signature exceeds ``cut``.

    One value per shift, ``-inf`` when no point qualifies. Only points in
    ``[shift + reach_lo, shift + reach_hi]`` are visited; ``y`` is a uniform grid.
    """
    n = y.size
    h = (y[n - 1] - y[0]) / (n - 1) if n > 1 else 1.0
    out = np.empty(shifts.size)
    for k in range(shifts.size):
        dk = shifts[k]
        a = max(int(np.floor((dk + reach_lo - y[0]) / h)) - 1, 0)
        b = min(int(np.ceil((dk + reach_hi - y[0]) / h)) + 2, n)
        best = np.inf
        seen = False
        for i in range(a, b):
            if not inc[i]:
                continue
            sig = 0.0
            for p in range(amp.size):
                d = (off[p] + dk) - y[i]
                sig += amp[p] * wid[p] / (wid[p] + 4.0 * d * d)
            if sig > cut:
                seen = True
                r = s[i] / sig
                if r < best:
                    best = r
        out[k] = best if seen else -np.inf
    return out
