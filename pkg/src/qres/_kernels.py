"""Compiled inner loops for the amplitude-marginalized likelihood."""

import math

import numba
import numpy as np

PROB_EPS = 1e-12
# strict IEEE arithmetic: reassociation or fused multiply-add would make
# results depend on the host CPU
FASTMATH = False


@numba.njit(cache=True, fastmath=FASTMATH, inline="always")
def _bit_terms(x, y, shots, fid):
    """ll, dll/dx, d2ll/dx2 for one outcome at probe phase x."""
    a = 2.0 * fid - 1.0
    s2 = math.sin(2.0 * x)
    c2 = math.cos(2.0 * x)
    p_raw = (1.0 - fid) + 0.5 * a * (1.0 + s2)
    p = min(max(p_raw, PROB_EPS), 1.0 - PROB_EPS)
    q = 1.0 - p
    miss = shots - y
    ll = 0.0
    if y > 0:
        ll += y * math.log(p)
    if miss > 0:
        ll += miss * math.log(q)
    if p_raw <= PROB_EPS or p_raw >= 1.0 - PROB_EPS:
        return ll, 0.0, 0.0
    dp = a * c2
    l_p = y / p - miss / q
    l_pp = -y / (p * p) - miss / (q * q)
    return ll, l_p * dp, l_pp * dp * dp - l_p * 2.0 * a * s2


@numba.njit(cache=True, fastmath=FASTMATH)
def _row_ll(y, mask, b, scale, shots, fid):
    tot = 0.0
    for i in range(b.size):
        if mask[i] != 0.0:
            tot += _bit_terms(scale * b[i], y[i], shots, fid)[0]
    return tot


@numba.njit(cache=True, fastmath=FASTMATH)
def _row_derivs(y, mask, b, sigma, u, shots, fid):
    d1 = 0.0
    d2 = 0.0
    for i in range(b.size):
        if mask[i] != 0.0:
            _, g1, g2 = _bit_terms(sigma * u * b[i], y[i], shots, fid)
            d1 += g1 * b[i]
            d2 += g2 * b[i] * b[i]
    return 1.0 / u - u + sigma * d1, -1.0 / (u * u) - 1.0 + sigma * sigma * d2


@numba.njit(cache=True, fastmath=FASTMATH)
def _newton(y, mask, b, sigma, shots, fid, u, lo, hi, iterations):
    """Safeguarded Newton on the log-posterior slope inside [lo, hi]."""
    for _ in range(iterations):
        f1, f2 = _row_derivs(y, mask, b, sigma, u, shots, fid)
        if f1 > 0:
            lo = u
        else:
            hi = u
        new = u - f1 / f2 if f2 < 0 else np.inf
        if not (lo < new < hi):
            new = 0.5 * (lo + hi)
        done = abs(new - u) < 1e-10 * (1.0 + u)
        u = new
        if done:
            break
    return u


MAX_WINDOWS = 4
MODE_MARGIN = 30.0      # nats below the best scan point still worth a window
EDGE_DROP = 25.0        # window edges must sit this far below their mode


@numba.njit(cache=True, fastmath=FASTMATH)
def _log_post(y, mask, b, sigma, shots, fid, u):
    return _row_ll(y, mask, b, sigma * u, shots, fid) + math.log(u) - 0.5 * u * u


@numba.njit(cache=True, fastmath=FASTMATH)
def _row_windows(y, mask, b, sigma, shots, fid, u_cut, halfwidth, scan_points, iterations,
                 win_lo, win_hi):
    """Integration windows around every relevant posterior mode of one row.

    The log-posterior is scanned on a coarse grid; each local maximum within
    ``MODE_MARGIN`` of the best is refined by Newton and given a window of
    ``halfwidth`` posterior widths.  Overlapping windows are merged.
    Returns the number of windows written to ``win_lo``/``win_hi``.
    """
    step = u_cut / scan_points
    vals = np.empty(scan_points)
    best = -np.inf
    for j in range(scan_points):
        g = step * (j + 0.5)
        vals[j] = _row_ll(y, mask, b, sigma * g, shots, fid) + math.log(g) - 0.5 * g * g
        if vals[j] > best:
            best = vals[j]
    # candidate cells, best first
    cand = np.empty(scan_points, dtype=np.int64)
    nc = 0
    for j in range(scan_points):
        left = vals[j - 1] if j > 0 else -np.inf
        right = vals[j + 1] if j < scan_points - 1 else -np.inf
        if vals[j] >= left and vals[j] >= right and vals[j] > best - MODE_MARGIN:
            cand[nc] = j
            nc += 1
    order = np.argsort(-vals[cand[:nc]])
    nc = min(nc, MAX_WINDOWS)
    lo_w = np.empty(nc)
    hi_w = np.empty(nc)
    for c in range(nc):
        j = cand[order[c]]
        u = step * (j + 0.5)
        u = _newton(y, mask, b, sigma, shots, fid, u, max(u - step, 1e-9), min(u + step, u_cut),
                    iterations)
        _, f2 = _row_derivs(y, mask, b, sigma, u, shots, fid)
        width = 1.0 / math.sqrt(max(-f2, 1e-12))
        lo_w[c] = max(u - halfwidth * width, 0.0)
        hi_w[c] = min(u + halfwidth * width, u_cut)
        # skewed posteriors (few outcomes) have heavier tails than the curvature suggests
        top = _log_post(y, mask, b, sigma, shots, fid, u)
        while hi_w[c] < u_cut and _log_post(y, mask, b, sigma, shots, fid, hi_w[c]) > top - EDGE_DROP:
            hi_w[c] = min(u + 2.0 * (hi_w[c] - u), u_cut)
        while lo_w[c] > 0.0 and _log_post(y, mask, b, sigma, shots, fid, lo_w[c]) > top - EDGE_DROP:
            lo_w[c] = max(u - 2.0 * (u - lo_w[c]), 0.0)
    # merge overlapping windows
    idx = np.argsort(lo_w)
    nw = 0
    for c in range(nc):
        a, z = lo_w[idx[c]], hi_w[idx[c]]
        if nw > 0 and a <= win_hi[nw - 1]:
            win_hi[nw - 1] = max(win_hi[nw - 1], z)
        else:
            win_lo[nw] = a
            win_hi[nw] = z
            nw += 1
    return nw


@numba.njit(cache=True, fastmath=FASTMATH)
def marginal_rows(y, mask, b, sigma, shots, fid, xi, wi, adaptive, u_cut, halfwidth,
                  scan_points, want_h):
    """Per-row log of the amplitude integral, and optionally the posterior score factor.

    Row ``r`` integrates ``u exp(-u^2/2) prod_i P(y_ri | sigma u b_ri)`` over
    ``u``.  ``h[r, i] = sum_q post_q u_q dll_ri/dx`` at the nodes.
    Returns ``(logz, h, lo, hi)``; ``lo``/``hi`` span all windows of a row.
    """
    R, n = b.shape
    Q = xi.size
    logz = np.empty(R)
    lo_out = np.empty(R)
    hi_out = np.empty(R)
    h = np.zeros((R, n)) if want_h else np.zeros((1, 1))
    W = MAX_WINDOWS
    gq = np.zeros((W * Q, n)) if want_h else np.zeros((1, 1))
    lq = np.empty(W * Q)
    uq = np.empty(W * Q)
    win_lo = np.empty(W)
    win_hi = np.empty(W)
    for r in range(R):
        if adaptive and sigma > 0:
            nw = _row_windows(y[r], mask[r], b[r], sigma, shots, fid, u_cut, halfwidth,
                              scan_points, 40, win_lo, win_hi)
        else:
            nw = 1
            win_lo[0] = 0.0
            win_hi[0] = u_cut
        lo_out[r] = win_lo[0]
        hi_out[r] = win_hi[nw - 1]
        mx = -np.inf
        m = 0
        for w in range(nw):
            lo = win_lo[w]
            half = 0.5 * (win_hi[w] - lo)
            if half <= 0.0:
                continue
            for q in range(Q):
                u = max(lo + half * (xi[q] + 1.0), 1e-300)
                uq[m] = u
                tot = 0.0
                x = sigma * u
                for i in range(n):
                    if mask[r, i] != 0.0:
                        ll, g1, _ = _bit_terms(x * b[r, i], y[r, i], shots, fid)
                        tot += ll
                        if want_h:
                            gq[m, i] = g1
                v = math.log(wi[q]) + math.log(half) + math.log(u) - 0.5 * u * u + tot
                lq[m] = v
                if v > mx:
                    mx = v
                m += 1
        if not math.isfinite(mx):
            logz[r] = mx
            continue
        tot = 0.0
        for q in range(m):
            tot += math.exp(lq[q] - mx)
        logz[r] = mx + math.log(tot)
        if want_h:
            for q in range(m):
                wgt = math.exp(lq[q] - logz[r]) * uq[q]
                if wgt < 1e-18:
                    continue
                for i in range(n):
                    if mask[r, i] != 0.0:
                        h[r, i] += wgt * gq[q, i]
    return logz, h, lo_out, hi_out
