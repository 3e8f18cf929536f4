"""Independent reference implementations used to freeze expected values."""
import itertools

import numpy as np


def chain_stationary(p_p, p_a, p_ack, m_max):
    """Brute-force stationary vector of the explicit retry chain.

    States per side: first-frame states F_0..F_M and block-ack states A_0..A_M.
    Returned order: payload F, payload A, ack F, ack A.
    """
    n = m_max + 1
    size = 4 * n
    t = np.zeros((size, size))
    blocks = [(0, n, p_p, 2 * n), (2 * n, 3 * n, p_ack, 0)]
    for f0, a0, p_frame, other0 in blocks:
        for m in range(n):
            nxt = f0 + m + 1 if m < m_max else f0
            t[f0 + m, a0 + m] += 1 - p_frame
            t[f0 + m, nxt] += p_frame
            t[a0 + m, other0] += 1 - p_a
            t[a0 + m, nxt] += p_a
    w, v = np.linalg.eig(t.T)
    x = np.real(v[:, np.argmin(abs(w - 1))])
    return x / x.sum()


def relay_count_mc(plos, d, n, rng, r_cap=200):
    """Sequential subdivision: try r = 0, 1, ... relays until every sub-link has LoS."""
    out = np.empty(n)
    for i in range(n):
        for r in range(r_cap + 1):
            q = plos(d / (r + 1))
            if r == 0:
                ok = rng.random() < q
            else:
                ok = bool(np.all(rng.random(r + 1) < q))
            if ok:
                out[i] = r
                break
        else:
            out[i] = r_cap
    return out


def overlap_mc(t_ld, t_md, period, n, rng):
    """Start l at time 0 and m's cycle at an independent uniform phase; test window overlap directly."""
    hits = 0
    for _ in range(n):
        s = rng.uniform(0.0, period)
        # m windows: [s + j*T, s + j*T + t_md] for integer j; check the two nearest ones
        hit = False
        for j in (-2, -1, 0, 1):
            a = s + j * period
            if a < t_ld and a + t_md > 0:
                hit = True
        hits += hit
    return hits / n


def enumerate_allocation(costs, lb, weights, paths, budgets):
    best = None
    for ks in itertools.product(*(range(l, l + len(c)) for c, l in zip(costs, lb))):
        if any(sum(weights[s] * ks[s] for s in p) > b for p, b in zip(paths, budgets)):
            continue
        c = sum(cs[k - l] for cs, k, l in zip(costs, ks, lb))
        if best is None or c < best:
            best = c
    return best
