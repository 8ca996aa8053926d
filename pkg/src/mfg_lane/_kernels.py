"""Compiled inner loops for the semi-Lagrangian HJB sweep and policy extraction.

Layout: value/field arrays are (K, J, B) = (s cell, d cell, speed node).
The running cost here must stay term-for-term identical to
``control.cost_components`` evaluated on the reduced-model state embedding.
"""

import math

import numpy as np
from numba import njit

# indices into the packed weight vector
(W_QS, W_QV, W_QA, W_QD, W_QVD, W_QAD, W_RA, W_RD, W_RDL, W_SA, W_SD, W_JERK, W_LAT, W_AGGR, W_UCOMF,
 W_CENT, W_ACENT, W_FUEL, W_MAND, W_EPS, W_TRANS, W_SMOOTH, W_OMEGA, W_INVR) = range(24)
N_WEIGHTS = 24

# indices into the packed geometry/dynamics vector
(G_S0, G_DS, G_D0, G_DD, G_DV, G_VMAX, G_VDMAX, G_TAULAT, G_LANEW, G_DT, G_CAP) = range(11)
N_GEOM = 11


@njit(cache=True)
def lane_gate(d_old, d_new, delta, centers, width):
    """Clamp a lateral successor to the band reachable under lane decision delta."""
    n = centers.shape[0]
    lane = 0
    best = 1e300
    for i in range(n):
        e = abs(centers[i] - d_old)
        if e < best:
            best = e
            lane = i
    lo = centers[lane] - 0.5 * width
    hi = centers[lane] + 0.5 * width
    if delta < 0 and lane > 0:
        lo = centers[lane - 1] - 0.5 * width
    if delta > 0 and lane < n - 1:
        hi = centers[lane + 1] + 0.5 * width
    if d_new < lo:
        return lo
    if d_new > hi:
        return hi
    return d_new


@njit(cache=True)
def lane_target(d, dtgt, centers):
    """Lateral target; NaN means keep the lane nearest to d."""
    if dtgt == dtgt:
        return dtgt
    best = centers[0]
    for i in range(1, centers.shape[0]):
        if abs(centers[i] - d) < abs(best - d):
            best = centers[i]
    return best


@njit(cache=True)
def state_cost(s, d, v, sref, vdes, dtgt, risk, w):
    """State-dependent part of the running cost rate (grid-level terms only)."""
    c = w[W_QS] * (s - sref) ** 2 + w[W_QV] * (v - vdes) ** 2 + w[W_QD] * (d - dtgt) ** 2
    c += w[W_OMEGA] * risk
    if abs(d - dtgt) > w[W_EPS]:
        c += w[W_MAND]
    cent = v * v * w[W_INVR] - w[W_ACENT]
    c += w[W_CENT] * cent * cent
    return c


@njit(cache=True)
def terminal_value(s, d, v, sref_T, vdes, dtgt_T, w):
    return w[W_QS] * (s - sref_T) ** 2 + w[W_QV] * (v - vdes) ** 2 + w[W_QD] * (d - dtgt_T) ** 2


@njit(cache=True)
def _bracket(f, n):
    if f < 0.0:
        f = 0.0
    if f > n - 1.0:
        f = n - 1.0
    i = int(f)
    if i > n - 2:
        i = n - 2
    return i, f - i


@njit(cache=True)
def _plane(V, k0, ws, jj, b0, wv):
    return (1 - ws) * (V[k0, jj, b0] * (1 - wv) + V[k0, jj, b0 + 1] * wv) \
        + ws * (V[k0 + 1, jj, b0] * (1 - wv) + V[k0 + 1, jj, b0 + 1] * wv)


@njit(cache=True)
def interp3(V, fs, fd, fv):
    K, J, B = V.shape
    k0, ws = _bracket(fs, K)
    j0, wd = _bracket(fd, J)
    b0, wv = _bracket(fv, B)
    return (1 - wd) * _plane(V, k0, ws, j0, b0, wv) + wd * _plane(V, k0, ws, j0 + 1, b0, wv)


@njit(cache=True)
def successor(s, d, v, ua, ud, dl, h0, h1, h3, geo, centers, d_lo, d_hi):
    """Deterministic one-step successor; returns (s', d', v', lateral speed, penalty)."""
    dt = geo[G_DT]
    v2 = v + (ua + h1) * dt
    if v2 < 0.0:
        v2 = 0.0
    if v2 > geo[G_VMAX]:
        v2 = geo[G_VMAX]
    step = (v + h0) * dt + 0.5 * ua * dt * dt
    if step < 0.0:
        step = 0.0
    s2 = s + step
    vd = ud * geo[G_TAULAT]
    if vd > geo[G_VDMAX]:
        vd = geo[G_VDMAX]
    if vd < -geo[G_VDMAX]:
        vd = -geo[G_VDMAX]
    d_raw = d + (vd + h3) * dt
    d2 = lane_gate(d, d_raw, dl, centers, geo[G_LANEW])
    pen = 0.0
    if d2 < d_lo:
        d2 = d_lo
        pen = geo[G_CAP]
    if d2 > d_hi:
        d2 = d_hi
        pen = geo[G_CAP]
    return s2, d2, v2, vd, pen


@njit(cache=True)
def _split_costs(ua_l, ud_l, w):
    """Per-level longitudinal cost and the comfort indicator table over (u_a, u_d) pairs."""
    nA = ua_l.shape[0]
    nD = ud_l.shape[0]
    ca = np.empty(nA)
    aggr = np.empty(nA * nD)
    for ia in range(nA):
        ua = ua_l[ia]
        ca[ia] = (w[W_QA] + w[W_RA] + w[W_FUEL]) * ua * ua
        for idd in range(nD):
            ud = ud_l[idd]
            aggr[ia * nD + idd] = w[W_AGGR] if math.sqrt(ua * ua + ud * ud) > w[W_UCOMF] else 0.0
    return ca, aggr


@njit(cache=True)
def _lateral_cost(ud, dl, vd, dplan, mexp, w):
    c = w[W_QVD] * vd * vd + (w[W_RD] + w[W_LAT]) * ud * ud
    c += w[W_RDL] * (dl - dplan) * (dl - dplan)
    c += w[W_TRANS] * dl * dl * mexp
    c += w[W_SMOOTH] * vd * vd
    return c


@njit(cache=True, nogil=True)
def hjb_step(Vn, risk, mexp, h0, h1, h3, ua_l, ud_l, dl_l, order, w, geo, centers, d_lo, d_hi,
             sref, vdes, dtgt, terminal, sref_T, dtgt_T, out, arg, k_lo=0, k_hi=-1):
    """One backward step over s cells [k_lo, k_hi); cells outside copy Vn."""
    K, J, B = out.shape
    dt = geo[G_DT]
    s0, ds, d0, dd, dv, vmax = geo[G_S0], geo[G_DS], geo[G_D0], geo[G_DD], geo[G_DV], geo[G_VMAX]
    inv_ds, inv_dv = 1.0 / ds, 1.0 / dv
    nU = order.shape[0]
    nA = ua_l.shape[0]
    nD = ud_l.shape[0]
    nL = dl_l.shape[0]
    nQ = nD * nL
    rank = np.empty(nU, np.int64)
    for q in range(nU):
        rank[order[q]] = q
    ca, aggr = _split_costs(ua_l, ud_l, w)
    d2s = np.empty(nQ)
    vds = np.empty(nQ)
    pens = np.empty(nQ)
    j0s = np.empty(nQ, np.int64)
    wds = np.empty(nQ)
    tgT = np.empty(nQ)
    cq = np.empty(nQ)
    plane = np.empty(J)
    if k_hi < 0 or k_hi > K:
        k_hi = K
    if k_lo < 0:
        k_lo = 0
    for k in range(K):
        if k < k_lo or k >= k_hi:
            for j in range(J):
                for b in range(B):
                    out[k, j, b] = Vn[k, j, b]
                    arg[k, j, b] = order[0]
    for k in range(k_lo, k_hi):
        s = s0 + (k + 0.5) * ds
        for j in range(J):
            d = d0 + (j + 0.5) * dd
            tg = lane_target(d, dtgt, centers)
            dplan = 0.0
            if abs(d - tg) > w[W_EPS]:
                dplan = 1.0 if tg > d else -1.0
            jlo = J
            jhi = 0
            for idd in range(nD):
                for il in range(nL):
                    q = idd * nL + il
                    s2, d2, v2, vd, pen = successor(s, d, 0.0, 0.0, ud_l[idd], dl_l[il], h0[k, j], h1[k, j],
                                                    h3[k, j], geo, centers, d_lo, d_hi)
                    d2s[q] = d2
                    vds[q] = vd
                    pens[q] = pen
                    tgT[q] = lane_target(d2, dtgt_T, centers)
                    jj, wd = _bracket((d2 - geo[G_D0]) / geo[G_DD] - 0.5, J)
                    j0s[q] = jj
                    wds[q] = wd
                    if jj < jlo:
                        jlo = jj
                    if jj + 1 > jhi:
                        jhi = jj + 1
            for b in range(B):
                v = b * dv
                base = state_cost(s, d, v, sref, vdes, tg, risk[k, j, b], w)
                mx = mexp[k, j, b]
                for idd in range(nD):
                    for il in range(nL):
                        q = idd * nL + il
                        cq[q] = _lateral_cost(ud_l[idd], dl_l[il], vds[q], dplan, mx, w)
                best = 1e300
                bi = -1
                br = nU
                hv1 = h1[k, j]
                sv = (v + h0[k, j]) * dt
                for ia in range(nA):
                    ua = ua_l[ia]
                    v2 = v + (ua + hv1) * dt
                    if v2 < 0.0:
                        v2 = 0.0
                    if v2 > vmax:
                        v2 = vmax
                    step = sv + 0.5 * ua * dt * dt
                    if step < 0.0:
                        step = 0.0
                    s2 = s + step
                    if not terminal:
                        k0, ws = _bracket((s2 - s0) * inv_ds - 0.5, K)
                        b0, wv = _bracket(v2 * inv_dv, B)
                        for jj in range(jlo, jhi + 1):
                            plane[jj] = _plane(Vn, k0, ws, jj, b0, wv)
                    for idd in range(nD):
                        for il in range(nL):
                            q = idd * nL + il
                            if terminal:
                                nxt = terminal_value(s2, d2s[q], v2, sref_T, vdes, tgT[q], w)
                            else:
                                wd = wds[q]
                                nxt = (1 - wd) * plane[j0s[q]] + wd * plane[j0s[q] + 1]
                            tot = (base + ca[ia] + cq[q] + aggr[ia * nD + idd]) * dt + nxt + pens[q]
                            idx = ia * nQ + q
                            if tot < best or (tot == best and rank[idx] < br):
                                best = tot
                                bi = idx
                                br = rank[idx]
                out[k, j, b] = best
                arg[k, j, b] = bi


@njit(cache=True, nogil=True)
def extract_batch(Vn, S, D, Vv, R, M, H0, H1, H3, UPA, UPD, use_jerk, ua_l, ud_l, dl_l, order, w, geo,
                  centers, d_lo, d_hi, sref, vdes, dtgt, terminal, sref_T, dtgt_T, out_idx, out_val):
    """Argmin control at arbitrary states (field values supplied per state)."""
    n = S.shape[0]
    dt = geo[G_DT]
    nU = order.shape[0]
    nD = ud_l.shape[0]
    nL = dl_l.shape[0]
    ca, aggr = _split_costs(ua_l, ud_l, w)
    for i in range(n):
        s = S[i]
        d = D[i]
        v = Vv[i]
        tg = lane_target(d, dtgt, centers)
        dplan = 0.0
        if abs(d - tg) > w[W_EPS]:
            dplan = 1.0 if tg > d else -1.0
        base = state_cost(s, d, v, sref, vdes, tg, R[i], w)
        best = 1e300
        bi = -1
        for q in range(nU):
            idx = order[q]
            ia = idx // (nD * nL)
            rem = idx - ia * nD * nL
            idd = rem // nL
            il = rem - idd * nL
            ua = ua_l[ia]
            ud = ud_l[idd]
            dl = dl_l[il]
            s2, d2, v2, vd, pen = successor(s, d, v, ua, ud, dl, H0[i], H1[i], H3[i], geo, centers, d_lo, d_hi)
            c = ca[ia] + _lateral_cost(ud, dl, vd, dplan, M[i], w) + aggr[ia * nD + idd]
            if use_jerk:
                ja = (ua - UPA[i]) / dt
                jd = (ud - UPD[i]) / dt
                c += (w[W_SA] + w[W_JERK]) * ja * ja + (w[W_SD] + w[W_JERK]) * jd * jd
            run = (base + c) * dt
            if terminal:
                nxt = terminal_value(s2, d2, v2, sref_T, vdes, lane_target(d2, dtgt_T, centers), w)
            else:
                nxt = interp3(Vn, (s2 - geo[G_S0]) / geo[G_DS] - 0.5,
                              (d2 - geo[G_D0]) / geo[G_DD] - 0.5, v2 / geo[G_DV])
            tot = run + nxt + pen
            if tot < best:
                best = tot
                bi = idx
        out_idx[i] = bi
        out_val[i] = best


@njit(cache=True)
def interp_fields(F, S, D, Vv, geo):
    """Trilinear lookup of a (K, J, B) node field at many states."""
    n = S.shape[0]
    out = np.empty(n)
    for i in range(n):
        out[i] = interp3(F, (S[i] - geo[G_S0]) / geo[G_DS] - 0.5, (D[i] - geo[G_D0]) / geo[G_DD] - 0.5,
                         Vv[i] / geo[G_DV])
    return out


@njit(cache=True)
def accumulate_spectra(acc, stack, mh, lvl, c, inv_ds):
    """acc[0, b] += c_b K_hat[lvl_b] m_hat; acc[1, b] += c_b / d_safe[lvl_b] K_hat[lvl_b] m_hat."""
    B = lvl.shape[0]
    n0, n1 = mh.shape
    for b in range(B):
        lv = lvl[b]
        c0 = c[b]
        c1 = c[b] * inv_ds[lv]
        for i in range(n0):
            for j in range(n1):
                z = stack[lv, i, j] * mh[i, j]
                acc[0, b, i, j] += c0 * z
                acc[1, b, i, j] += c1 * z


@njit(cache=True)
def successor_batch(S, D, Vv, IDX, H0, H1, H3, ua_l, ud_l, dl_l, geo, centers, d_lo, d_hi, S2, D2, V2):
    nD = ud_l.shape[0]
    nL = dl_l.shape[0]
    for i in range(S.shape[0]):
        idx = IDX[i]
        ia = idx // (nD * nL)
        rem = idx - ia * nD * nL
        idd = rem // nL
        il = rem - idd * nL
        s2, d2, v2, vd, pen = successor(S[i], D[i], Vv[i], ua_l[ia], ud_l[idd], dl_l[il], H0[i], H1[i], H3[i],
                                        geo, centers, d_lo, d_hi)
        S2[i] = s2
        D2[i] = d2
        V2[i] = v2


@njit(cache=True, nogil=True)
def policy_eval_step(Vn, risk, mexp, h0, h1, h3, ua_l, ud_l, dl_l, w, geo, centers, d_lo, d_hi,
                     sref, vdes, dtgt, terminal, sref_T, dtgt_T, arg, out):
    """One backward step of policy evaluation with the control fixed to arg[k, j, b]."""
    K, J, B = out.shape
    dt = geo[G_DT]
    nD = ud_l.shape[0]
    nL = dl_l.shape[0]
    ca, aggr = _split_costs(ua_l, ud_l, w)
    for k in range(K):
        s = geo[G_S0] + (k + 0.5) * geo[G_DS]
        for j in range(J):
            d = geo[G_D0] + (j + 0.5) * geo[G_DD]
            tg = lane_target(d, dtgt, centers)
            dplan = 0.0
            if abs(d - tg) > w[W_EPS]:
                dplan = 1.0 if tg > d else -1.0
            for b in range(B):
                v = b * geo[G_DV]
                idx = arg[k, j, b]
                ia = idx // (nD * nL)
                rem = idx - ia * nD * nL
                idd = rem // nL
                il = rem - idd * nL
                s2, d2, v2, vd, pen = successor(s, d, v, ua_l[ia], ud_l[idd], dl_l[il], h0[k, j], h1[k, j],
                                                h3[k, j], geo, centers, d_lo, d_hi)
                run = (state_cost(s, d, v, sref, vdes, tg, risk[k, j, b], w) + ca[ia]
                       + _lateral_cost(ud_l[idd], dl_l[il], vd, dplan, mexp[k, j, b], w) + aggr[ia * nD + idd]) * dt
                if terminal:
                    nxt = terminal_value(s2, d2, v2, sref_T, vdes, lane_target(d2, dtgt_T, centers), w)
                else:
                    nxt = interp3(Vn, (s2 - geo[G_S0]) / geo[G_DS] - 0.5, (d2 - geo[G_D0]) / geo[G_DD] - 0.5,
                                  v2 / geo[G_DV])
                out[k, j, b] = run + nxt + pen
