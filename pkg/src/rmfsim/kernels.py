"""Compiled batch kernel for the direct replica-system engine.

One call advances a block of independent paths.  Each path consumes uniforms
sequentially from its own row of ``u`` in a fixed order (event time, stream
selection, then one routing draw per target neuron), which is the exact
order the pure-python reference engine uses, so paths replay identically
across the two implementations.

No cross-path reductions happen inside the kernel: every output is indexed
by path, so results are independent of the number of numba threads.
"""

import numpy as np
from numba import njit, prange

STATUS_OK = 0
STATUS_EXHAUSTED = 1
STATUS_OVERFLOW = 2


@njit(cache=True, parallel=True)
def rmf_direct_block(
    lam0,           # (B, M*K) initial intensities
    mu,             # (K, K) weights, mu[j,i] = effect of a spike of j+1 on i+1
    r,              # (K,) reset values
    horizon,
    grid,           # (G+1,) grid times with grid[0]=0, grid[-1]=horizon
    u,              # (B, C) uniform draws per path
    m_count,
    k,
    focal,          # 1-based focal replica for channel tallies
    h_max,
    want_lam_grid,
    want_cnt_grid,
    want_int_grid,
    want_routed,
    want_arr_all,
    lam_grid,       # (B, M*K, G+1) or dummy
    cnt_grid,       # (B, M*K, G+1) int64 or dummy
    int_grid,       # (B, M*K, G+1) or dummy
    focal_arr,      # (B, K, K, G+1) int64: arrivals source j -> (focal, i)
    final_counts,   # (B, M*K) int64 spike counts at horizon
    routed,         # (B, M, K, K) int64 or dummy
    arr_all,        # (B, M, K, K) int64 or dummy: arrivals j -> (v, i) per v
    status,         # (B,) int64
    consumed,       # (B,) int64
):
    n_paths = lam0.shape[0]
    n_streams = m_count * k
    n_grid = grid.shape[0] - 1
    cap = u.shape[1]
    draws_per_event = 2 + (k - 1)

    for p in prange(n_paths):
        lam = lam0[p].copy()
        cnt = np.zeros(n_streams, dtype=np.int64)
        int_acc = np.zeros(n_streams)
        fa = np.zeros((k, k), dtype=np.int64)
        t = 0.0
        c = 0
        g_next = 0
        st = STATUS_OK

        while True:
            if c + draws_per_event > cap:
                st = STATUS_EXHAUSTED
                break
            tot = 0.0
            for s in range(n_streams):
                tot += lam[s]
            dt = -np.log(u[p, c]) / tot
            c += 1
            t_new = t + dt
            t_stop = t_new if t_new < horizon else horizon

            while g_next <= n_grid and grid[g_next] <= t_stop:
                if want_lam_grid:
                    for s in range(n_streams):
                        lam_grid[p, s, g_next] = lam[s]
                if want_cnt_grid:
                    for s in range(n_streams):
                        cnt_grid[p, s, g_next] = cnt[s]
                if want_int_grid:
                    for s in range(n_streams):
                        int_grid[p, s, g_next] = int_acc[s] + lam[s] * (grid[g_next] - t)
                for j in range(k):
                    for i in range(k):
                        focal_arr[p, j, i, g_next] = fa[j, i]
                g_next += 1

            if t_new > horizon:
                break
            for s in range(n_streams):
                int_acc[s] += lam[s] * dt
            t = t_new

            x = u[p, c] * tot
            c += 1
            acc = 0.0
            spiker = n_streams - 1
            for s in range(n_streams):
                acc += lam[s]
                if acc >= x:
                    spiker = s
                    break
            rep = spiker // k + 1   # 1-based replica
            neu = spiker % k        # 0-based neuron
            cnt[spiker] += 1
            lam[spiker] = r[neu]

            for i in range(k):
                if i == neu:
                    continue
                # uniform on {1..M}\{rep}
                v = 1 + int(u[p, c] * (m_count - 1))
                c += 1
                if v > m_count - 1:
                    v = m_count - 1
                if v >= rep:
                    v += 1
                if v == focal:
                    fa[neu, i] += 1
                    if want_routed:
                        routed[p, rep - 1, neu, i] += 1
                if want_arr_all:
                    arr_all[p, v - 1, neu, i] += 1
                w = mu[neu, i]
                if w != 0.0:
                    tgt = (v - 1) * k + i
                    lam[tgt] += w
                    if lam[tgt] > h_max:
                        st = STATUS_OVERFLOW
                        break
            if st != STATUS_OK:
                break

        if st == STATUS_OK:
            # flush remaining grid rows with the final (constant) state
            while g_next <= n_grid:
                if want_lam_grid:
                    for s in range(n_streams):
                        lam_grid[p, s, g_next] = lam[s]
                if want_cnt_grid:
                    for s in range(n_streams):
                        cnt_grid[p, s, g_next] = cnt[s]
                if want_int_grid:
                    for s in range(n_streams):
                        int_grid[p, s, g_next] = int_acc[s] + lam[s] * (grid[g_next] - t)
                for j in range(k):
                    for i in range(k):
                        focal_arr[p, j, i, g_next] = fa[j, i]
                g_next += 1
            for s in range(n_streams):
                final_counts[p, s] = cnt[s]
        status[p] = st
        consumed[p] = c
