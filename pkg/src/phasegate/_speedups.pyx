# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
# cython: language_level=3
"""Compiled per-frame streaming loop.

Same contract as pipeline._run_arrays_py; that function is the readable
reference. Keep the two in lockstep when changing either.
"""

import numpy as np

from libc.math cimport exp, log, sqrt, fabs, tanh

cdef double ZERO_NORM_EPS = 1e-12


cdef inline double _sigmoid(double x) noexcept:
    cdef double e
    if x >= 0.0:
        e = exp(-x)
        return 1.0 / (1.0 + e)
    e = exp(x)
    return e / (1.0 + e)


cdef inline double _cosine(double dot, double na, double nb) noexcept:
    cdef double s
    if na < ZERO_NORM_EPS or nb < ZERO_NORM_EPS:
        return 0.0
    s = dot / (na * nb)
    if s > 1.0:
        s = 1.0
    elif s < -1.0:
        s = -1.0
    return s


def run_sequence_kernel(
    double[:, ::1] W, double[:, ::1] Fw, double[::1] Fb,
    double a_m, double a_u, double tau_m, double tau_u,
    int mode_m, int mode_u,
    double theta, double decay,
    int k,
    double[:, ::1] X,
    double[:, ::1] mem_feats, double[:, ::1] mem_dists,
    long long[::1] mem_tsteps, double[::1] mem_norms, long long[::1] mem_state,
    double[:, :, ::1] pro_feats, double[:, ::1] pro_uncs,
    long long[:, ::1] pro_steps, double[:, ::1] pro_norms, long long[::1] pro_counts,
    int insert_enabled, long long[::1] labels,
    int stochastic, double[:, ::1] pol_w1, double[::1] pol_b1,
    double[::1] pol_w2, double pol_b2, double[::1] uniforms,
    long long insert_step,
    double[:, ::1] base_dist, double[:, ::1] final_dist,
    double[::1] gm_arr, double[::1] gu_arr,
    long long[::1] mem_cnt, long long[:, ::1] proto_ids, long long[::1] proto_n,
    double[:, ::1] ctx_arr, unsigned char[::1] has_ctx,
    double[:, ::1] fu_arr, long long[::1] conf_idx,
):
    cdef Py_ssize_t T = X.shape[0]
    cdef Py_ssize_t D = X.shape[1]
    cdef Py_ssize_t C = W.shape[0]
    cdef Py_ssize_t K = mem_feats.shape[0]
    cdef Py_ssize_t N = pro_feats.shape[1]

    scratch_p = np.zeros(C)
    scratch_r = np.zeros(K)
    scratch_fm = np.zeros(D)
    scratch_F = np.zeros(D)
    cand_score_a = np.zeros(k)
    cand_sim_a = np.zeros(k)
    cand_step_a = np.zeros(k, dtype=np.int64)
    cand_flat_a = np.zeros(k, dtype=np.int64)
    cand_c_a = np.zeros(k, dtype=np.int64)
    cand_s_a = np.zeros(k, dtype=np.int64)
    cdef double[::1] p = scratch_p
    cdef double[::1] r = scratch_r
    cdef double[::1] fm = scratch_fm
    cdef double[::1] F = scratch_F
    cdef double[::1] cand_score = cand_score_a
    cdef double[::1] cand_sim = cand_sim_a
    cdef long long[::1] cand_step = cand_step_a
    cdef long long[::1] cand_flat = cand_flat_a
    cdef long long[::1] cand_c = cand_c_a
    cdef long long[::1] cand_s = cand_s_a

    cdef Py_ssize_t t, c, d, j, i, m, slot, n_mem, n_sel, n_cand, pos, sc
    cdef long long head, cnt, flat, c_gt, n_c
    cdef double zmax, zsum, c_t, f_norm, acc, rmax, wsum, wv
    cdef double sim, score, g_m, g_u, u, occ, ent, margin, second, pi, hsum
    cdef double hvec[8]
    cdef int better, store, add

    for t in range(T):
        # baseline head: p = softmax(W @ f)
        zmax = -1e300
        for c in range(C):
            acc = 0.0
            for d in range(D):
                acc += W[c, d] * X[t, d]
            p[c] = acc
            if acc > zmax:
                zmax = acc
        zsum = 0.0
        for c in range(C):
            p[c] = exp(p[c] - zmax)
            zsum += p[c]
        m = 0
        for c in range(C):
            p[c] /= zsum
            base_dist[t, c] = p[c]
            if p[c] > p[m]:
                m = c
        conf_idx[t] = m
        c_t = p[m]

        f_norm = 0.0
        for d in range(D):
            f_norm += X[t, d] * X[t, d]
        f_norm = sqrt(f_norm)

        # memory pathway: filter by reliability, softmax-weight, fuse
        n_mem = <Py_ssize_t> mem_state[0]
        head = mem_state[1]
        n_sel = 0
        rmax = -1e300
        for i in range(n_mem):
            slot = <Py_ssize_t> ((head + i) % K)
            acc = 0.0
            for d in range(D):
                acc += mem_feats[slot, d] * X[t, d]
            sim = _cosine(acc, mem_norms[slot], f_norm)
            acc = 0.0
            for c in range(C):
                acc += mem_dists[slot, c] * p[c]
            r[i] = sim + acc + exp(-fabs(<double> (t - mem_tsteps[slot])) / decay)
            if r[i] > theta:
                n_sel += 1
                if r[i] > rmax:
                    rmax = r[i]
        mem_cnt[t] = n_sel
        if n_sel > 0:
            has_ctx[t] = 1
            wsum = 0.0
            for i in range(n_mem):
                if r[i] > theta:
                    wsum += exp(r[i] - rmax)
            for i in range(n_mem):
                if r[i] > theta:
                    wv = exp(r[i] - rmax) / wsum
                    slot = <Py_ssize_t> ((head + i) % K)
                    for d in range(D):
                        ctx_arr[t, d] += wv * mem_feats[slot, d]
            for d in range(D):
                acc = Fb[d]
                for j in range(D):
                    acc += Fw[d, j] * X[t, j] + Fw[d, D + j] * ctx_arr[t, j]
                fm[d] = acc
        else:
            for d in range(D):
                fm[d] = X[t, d]

        # prototype pathway: top-k by class-prob-weighted cosine
        n_cand = 0
        for c in range(C):
            cnt = pro_counts[c]
            for sc in range(<Py_ssize_t> cnt):
                acc = 0.0
                for d in range(D):
                    acc += pro_feats[c, sc, d] * X[t, d]
                sim = _cosine(acc, pro_norms[c, sc], f_norm)
                score = p[c] * sim
                flat = c * N + sc
                # ranking: score desc, then sim desc, then step asc, then flat asc
                if n_cand == k:
                    better = 0
                    if score > cand_score[k - 1]:
                        better = 1
                    elif score == cand_score[k - 1]:
                        if sim > cand_sim[k - 1]:
                            better = 1
                        elif sim == cand_sim[k - 1]:
                            if pro_steps[c, sc] < cand_step[k - 1]:
                                better = 1
                    if not better:
                        continue
                    n_cand -= 1
                pos = n_cand
                while pos > 0:
                    better = 0
                    if score > cand_score[pos - 1]:
                        better = 1
                    elif score == cand_score[pos - 1]:
                        if sim > cand_sim[pos - 1]:
                            better = 1
                        elif sim == cand_sim[pos - 1]:
                            if pro_steps[c, sc] < cand_step[pos - 1]:
                                better = 1
                    if not better:
                        break
                    cand_score[pos] = cand_score[pos - 1]
                    cand_sim[pos] = cand_sim[pos - 1]
                    cand_step[pos] = cand_step[pos - 1]
                    cand_flat[pos] = cand_flat[pos - 1]
                    cand_c[pos] = cand_c[pos - 1]
                    cand_s[pos] = cand_s[pos - 1]
                    pos -= 1
                cand_score[pos] = score
                cand_sim[pos] = sim
                cand_step[pos] = pro_steps[c, sc]
                cand_flat[pos] = flat
                cand_c[pos] = c
                cand_s[pos] = sc
                n_cand += 1
        if n_cand > 0:
            rmax = cand_sim[0]
            for j in range(1, n_cand):
                if cand_sim[j] > rmax:
                    rmax = cand_sim[j]
            wsum = 0.0
            for j in range(n_cand):
                wsum += exp(cand_sim[j] - rmax)
            for d in range(D):
                fu_arr[t, d] = X[t, d]
            for j in range(n_cand):
                wv = exp(cand_sim[j] - rmax) / wsum
                for d in range(D):
                    fu_arr[t, d] += wv * pro_feats[cand_c[j], cand_s[j], d]
                proto_ids[t, j] = cand_flat[j]
            proto_n[t] = n_cand
        else:
            for d in range(D):
                fu_arr[t, d] = X[t, d]

        # gate and final prediction
        if mode_m == 1:
            g_m = 0.0
        elif mode_m == 2:
            g_m = 1.0
        else:
            g_m = _sigmoid(a_m * (tau_m - c_t))
        if mode_u == 1:
            g_u = 0.0
        elif mode_u == 2:
            g_u = 1.0
        else:
            g_u = _sigmoid(a_u * (tau_u - c_t))
        gm_arr[t] = g_m
        gu_arr[t] = g_u
        for d in range(D):
            F[d] = X[t, d] + g_m * fm[d] + g_u * fu_arr[t, d]
        zmax = -1e300
        for c in range(C):
            acc = 0.0
            for d in range(D):
                acc += W[c, d] * F[d]
            final_dist[t, c] = acc
            if acc > zmax:
                zmax = acc
        zsum = 0.0
        for c in range(C):
            final_dist[t, c] = exp(final_dist[t, c] - zmax)
            zsum += final_dist[t, c]
        for c in range(C):
            final_dist[t, c] /= zsum

        # store the frame after predicting so the bank holds only the past
        if mem_state[0] < <long long> K:
            slot = <Py_ssize_t> ((mem_state[1] + mem_state[0]) % K)
            mem_state[0] += 1
        else:
            slot = <Py_ssize_t> mem_state[1]
            mem_state[1] = (mem_state[1] + 1) % K
        for d in range(D):
            mem_feats[slot, d] = X[t, d]
        for c in range(C):
            mem_dists[slot, c] = p[c]
        mem_tsteps[slot] = t
        mem_norms[slot] = f_norm

        if insert_enabled:
            c_gt = labels[t]
            u = 1.0 - c_t
            occ = (<double> pro_counts[c_gt]) / (<double> N)
            if stochastic:
                ent = 0.0
                for c in range(C):
                    if p[c] > 0.0:
                        ent -= p[c] * log(p[c])
                if C >= 2:
                    second = -1e300
                    for c in range(C):
                        if c != m and p[c] > second:
                            second = p[c]
                    margin = c_t - second
                else:
                    margin = 1.0
                for j in range(8):
                    hsum = pol_w1[j, 0] * u + pol_w1[j, 1] * ent
                    hsum += pol_w1[j, 2] * margin + pol_w1[j, 3] * occ
                    hvec[j] = tanh(hsum + pol_b1[j])
                hsum = pol_b2
                for j in range(8):
                    hsum += pol_w2[j] * hvec[j]
                pi = _sigmoid(hsum)
                add = 1 if uniforms[t] < pi else 0
            else:
                add = 1 if (occ < 1.0 or u > 0.0) else 0
            if add:
                n_c = pro_counts[c_gt]
                if n_c < <long long> N:
                    slot = <Py_ssize_t> n_c
                    pro_counts[c_gt] = n_c + 1
                    store = 1
                else:
                    slot = 0
                    for j in range(1, <Py_ssize_t> n_c):
                        if pro_uncs[c_gt, j] < pro_uncs[c_gt, slot] or (
                            pro_uncs[c_gt, j] == pro_uncs[c_gt, slot]
                            and pro_steps[c_gt, j] < pro_steps[c_gt, slot]
                        ):
                            slot = j
                    store = 1 if u > pro_uncs[c_gt, slot] else 0
                if store:
                    for d in range(D):
                        pro_feats[c_gt, slot, d] = X[t, d]
                    pro_uncs[c_gt, slot] = u
                    pro_steps[c_gt, slot] = insert_step
                    pro_norms[c_gt, slot] = f_norm
                insert_step += 1
    return insert_step
