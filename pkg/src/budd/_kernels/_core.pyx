# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels; arithmetic mirrors budd._kernels.reference exactly.

Compiled with -ffp-contract=off so no FMA fusion changes results relative to
the pure-Python backend. Keep expression shapes in lockstep with reference.py.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, fabs, sqrt
from libc.stdlib cimport free, malloc, qsort

cnp.import_array()

cdef double SQRT_2PI = 2.5066282746310002
cdef double PDF_FLOOR = 1e-300

cdef int TAG_MONITORING = 0
cdef int TAG_FLAGGED = 1
cdef int TAG_DEFORESTED = 2

cdef int TV_STALL_ITERS = 5


cdef int _cmp_double(const void* a, const void* b) noexcept nogil:
    cdef double x = (<const double*>a)[0]
    cdef double y = (<const double*>b)[0]
    if x < y:
        return -1
    if x > y:
        return 1
    return 0


def fit_pixels(values, valid, double sigma_min, int min_obs):
    """See budd._kernels.reference.fit_pixels."""
    cdef const float[:, ::1] v = values
    cdef const unsigned char[:, ::1] ok = valid
    cdef Py_ssize_t tcount = v.shape[0]
    cdef Py_ssize_t n = v.shape[1]

    mu_arr = np.full(n, np.nan)
    sg_arr = np.full(n, np.nan)
    ct_arr = np.zeros(n, dtype=np.int32)
    cdef double[::1] mu = mu_arr
    cdef double[::1] sg = sg_arr
    cdef int[::1] ct = ct_arr

    cdef double* buf = <double*>malloc(tcount * sizeof(double) if tcount > 0 else sizeof(double))
    cdef double* srt = <double*>malloc(tcount * sizeof(double) if tcount > 0 else sizeof(double))
    if buf == NULL or srt == NULL:
        free(buf)
        free(srt)
        raise MemoryError()

    cdef Py_ssize_t i, t, k, c, h
    cdef double med, total, mean, acc, d, sd
    try:
        with nogil:
            for i in range(n):
                c = 0
                for t in range(tcount):
                    if ok[t, i]:
                        buf[c] = <double>v[t, i]
                        c += 1
                ct[i] = <int>c
                if c < min_obs:
                    continue
                for k in range(c):
                    srt[k] = buf[k]
                qsort(srt, c, sizeof(double), _cmp_double)
                h = c >> 1
                if c & 1:
                    med = srt[h]
                else:
                    med = (srt[h - 1] + srt[h]) / 2.0
                total = 0.0
                for k in range(c):
                    total += buf[k]
                mean = total / c
                acc = 0.0
                for k in range(c):
                    d = buf[k] - mean
                    acc += d * d
                sd = sqrt(acc / c)
                if sd < sigma_min:
                    sd = sigma_min
                mu[i] = med
                sg[i] = sd
    finally:
        free(buf)
        free(srt)
    return mu_arr, sg_arr, ct_arr


def detect_pixels(
    dates,
    starts,
    rows,
    vals,
    valids,
    mu_f,
    sigma,
    mu_nf,
    modeled,
    double flag,
    double confirm,
    double clear,
    double prior,
    int min_obs,
):
    """See budd._kernels.reference.detect_pixels."""
    cdef const int[::1] dates_v = dates
    cdef const int[::1] st0 = starts[0]
    cdef const int[::1] st1 = starts[1]
    cdef const int[::1] st2 = starts[2]
    cdef const int[::1] rw0 = rows[0]
    cdef const int[::1] rw1 = rows[1]
    cdef const int[::1] rw2 = rows[2]
    cdef const float[:, ::1] v0 = vals[0]
    cdef const float[:, ::1] v1 = vals[1]
    cdef const float[:, ::1] v2 = vals[2]
    cdef const unsigned char[:, ::1] k0 = valids[0]
    cdef const unsigned char[:, ::1] k1 = valids[1]
    cdef const unsigned char[:, ::1] k2 = valids[2]
    cdef const double[:, ::1] muf = mu_f
    cdef const double[:, ::1] sgm = sigma
    cdef const double[:, ::1] mun = mu_nf
    cdef const unsigned char[:, ::1] mod = modeled

    cdef Py_ssize_t nsteps = dates_v.shape[0]
    cdef Py_ssize_t n = muf.shape[1]

    tag_arr = np.zeros(n, dtype=np.uint8)
    post_arr = np.zeros(n)
    count_arr = np.zeros(n, dtype=np.int32)
    flag_arr = np.full(n, -1, dtype=np.int32)
    conf_arr = np.full(n, -1, dtype=np.int32)
    bits_arr = np.zeros(n, dtype=np.uint8)
    cdef unsigned char[::1] tag = tag_arr
    cdef double[::1] post = post_arr
    cdef int[::1] count = count_arr
    cdef int[::1] flagd = flag_arr
    cdef int[::1] confd = conf_arr
    cdef unsigned char[::1] bits = bits_arr

    cdef Py_ssize_t i, s, m, k, t, a, b
    cdef int t_tag, t_count, t_flag, t_conf, used, t_bits
    cdef double t_post, lf, lnf, x, z, pf, pn, num, p0, p1
    cdef double c_muf, c_sd, c_mun

    with nogil:
        for i in range(n):
            if not (mod[0, i] or mod[1, i] or mod[2, i]):
                continue
            t_tag = TAG_MONITORING
            t_post = 0.0
            t_count = 0
            t_flag = -1
            t_conf = -1
            t_bits = 0
            for s in range(nsteps):
                lf = 1.0
                lnf = 1.0
                used = 0
                for m in range(3):
                    if not mod[m, i]:
                        continue
                    if m == 0:
                        a = st0[s]; b = st0[s + 1]
                    elif m == 1:
                        a = st1[s]; b = st1[s + 1]
                    else:
                        a = st2[s]; b = st2[s + 1]
                    if a == b:
                        continue
                    c_muf = muf[m, i]
                    c_sd = sgm[m, i]
                    c_mun = mun[m, i]
                    for k in range(a, b):
                        if m == 0:
                            t = rw0[k]
                            if k0[t, i] == 0:
                                continue
                            x = <double>v0[t, i]
                        elif m == 1:
                            t = rw1[k]
                            if k1[t, i] == 0:
                                continue
                            x = <double>v1[t, i]
                        else:
                            t = rw2[k]
                            if k2[t, i] == 0:
                                continue
                            x = <double>v2[t, i]
                        z = (x - c_muf) / c_sd
                        pf = exp(-0.5 * z * z) / (c_sd * SQRT_2PI)
                        if pf < PDF_FLOOR:
                            pf = PDF_FLOOR
                        z = (x - c_mun) / c_sd
                        pn = exp(-0.5 * z * z) / (c_sd * SQRT_2PI)
                        if pn < PDF_FLOOR:
                            pn = PDF_FLOOR
                        lf *= pf
                        if lf < PDF_FLOOR:
                            lf = PDF_FLOOR
                        lnf *= pn
                        if lnf < PDF_FLOOR:
                            lnf = PDF_FLOOR
                        used |= 1 << m
                if used == 0:
                    continue
                if t_tag == TAG_MONITORING:
                    num = lnf * prior
                    p0 = num / (num + lf * (1.0 - prior))
                    if p0 > flag:
                        t_tag = TAG_FLAGGED
                        t_post = p0
                        t_count = 1
                        t_flag = dates_v[s]
                        t_bits = used
                else:
                    num = lnf * t_post
                    p1 = num / (num + lf * (1.0 - t_post))
                    t_count += 1
                    t_bits |= used
                    if p1 > confirm and t_count >= min_obs:
                        t_tag = TAG_DEFORESTED
                        t_post = p1
                        t_conf = dates_v[s]
                        break
                    elif p1 < clear:
                        t_tag = TAG_MONITORING
                        t_post = 0.0
                        t_count = 0
                        t_flag = -1
                        t_bits = 0
                    else:
                        t_post = p1
            tag[i] = <unsigned char>t_tag
            post[i] = t_post
            count[i] = t_count
            flagd[i] = t_flag
            confd[i] = t_conf
            bits[i] = <unsigned char>t_bits
    return tag_arr, post_arr, count_arr, flag_arr, conf_arr, bits_arr


cdef double _tv_objective(
    const double[:, :, ::1] u,
    const double[:, :, ::1] f,
    const double[:, :, ::1] w,
    double lam,
    double wx,
    double wt,
) noexcept nogil:
    cdef Py_ssize_t nt = u.shape[0], ny = u.shape[1], nx = u.shape[2]
    cdef Py_ssize_t t, y, x
    cdef double fid = 0.0, tv = 0.0, r
    for t in range(nt):
        for y in range(ny):
            for x in range(nx):
                r = u[t, y, x] - f[t, y, x]
                fid += w[t, y, x] * r * r
    for t in range(nt - 1):
        for y in range(ny):
            for x in range(nx):
                tv += wt * fabs(u[t + 1, y, x] - u[t, y, x])
    for t in range(nt):
        for y in range(ny - 1):
            for x in range(nx):
                tv += wx * fabs(u[t, y + 1, x] - u[t, y, x])
    for t in range(nt):
        for y in range(ny):
            for x in range(nx - 1):
                tv += wx * fabs(u[t, y, x + 1] - u[t, y, x])
    return 0.5 * fid + lam * tv


def tv_solve(f, w, double lam, double wx, double wt, int max_iters, double tol):
    """See budd._kernels.reference.tv_solve."""
    f_arr = np.ascontiguousarray(f, dtype=np.float64)
    w_arr = np.ascontiguousarray(w, dtype=np.float64)
    cdef const double[:, :, ::1] fv = f_arr
    cdef const double[:, :, ::1] wv = w_arr
    cdef Py_ssize_t nt = fv.shape[0], ny = fv.shape[1], nx = fv.shape[2]

    cdef double start_obj = _tv_objective(fv, fv, wv, lam, wx, wt)
    history = [start_obj]
    if lam == 0.0 or f_arr.size == 0 or float(np.min(f_arr)) == float(np.max(f_arr)):
        return f_arr.copy(), history

    cdef double lnorm = sqrt(4.0 * (wt * wt + 2.0 * wx * wx))
    cdef double tau = 1.0 / lnorm
    cdef double sig = 1.0 / lnorm

    u_arr = f_arr.copy()
    ub_arr = f_arr.copy()
    ubest_arr = f_arr.copy()
    pt_arr = np.zeros((max(nt - 1, 0), ny, nx))
    py_arr = np.zeros((nt, max(ny - 1, 0), nx))
    px_arr = np.zeros((nt, ny, max(nx - 1, 0)))
    div_arr = np.zeros((nt, ny, nx))
    cdef double[:, :, ::1] u = u_arr
    cdef double[:, :, ::1] ub = ub_arr
    cdef double[:, :, ::1] ubest = ubest_arr
    cdef double[:, :, ::1] pt = pt_arr
    cdef double[:, :, ::1] py = py_arr
    cdef double[:, :, ::1] px = px_arr
    cdef double[:, :, ::1] div = div_arr

    cdef double best = start_obj
    cdef double prev_raw = start_obj
    cdef double raw, p, un
    cdef int stall = 0
    cdef int it
    cdef Py_ssize_t t, y, x
    cdef bint done = False

    for it in range(max_iters):
        with nogil:
            for t in range(nt - 1):
                for y in range(ny):
                    for x in range(nx):
                        p = pt[t, y, x] + (sig * wt) * (ub[t + 1, y, x] - ub[t, y, x])
                        if p > lam:
                            p = lam
                        elif p < -lam:
                            p = -lam
                        pt[t, y, x] = p
            for t in range(nt):
                for y in range(ny - 1):
                    for x in range(nx):
                        p = py[t, y, x] + (sig * wx) * (ub[t, y + 1, x] - ub[t, y, x])
                        if p > lam:
                            p = lam
                        elif p < -lam:
                            p = -lam
                        py[t, y, x] = p
            for t in range(nt):
                for y in range(ny):
                    for x in range(nx - 1):
                        p = px[t, y, x] + (sig * wx) * (ub[t, y, x + 1] - ub[t, y, x])
                        if p > lam:
                            p = lam
                        elif p < -lam:
                            p = -lam
                        px[t, y, x] = p

            for t in range(nt):
                for y in range(ny):
                    for x in range(nx):
                        div[t, y, x] = 0.0
            for t in range(nt - 1):
                for y in range(ny):
                    for x in range(nx):
                        div[t, y, x] -= wt * pt[t, y, x]
                        div[t + 1, y, x] += wt * pt[t, y, x]
            for t in range(nt):
                for y in range(ny - 1):
                    for x in range(nx):
                        div[t, y, x] -= wx * py[t, y, x]
                        div[t, y + 1, x] += wx * py[t, y, x]
            for t in range(nt):
                for y in range(ny):
                    for x in range(nx - 1):
                        div[t, y, x] -= wx * px[t, y, x]
                        div[t, y, x + 1] += wx * px[t, y, x]

            for t in range(nt):
                for y in range(ny):
                    for x in range(nx):
                        un = (u[t, y, x] - tau * div[t, y, x]
                              + tau * wv[t, y, x] * fv[t, y, x]) / (1.0 + tau * wv[t, y, x])
                        ub[t, y, x] = 2.0 * un - u[t, y, x]
                        u[t, y, x] = un

            raw = _tv_objective(u, fv, wv, lam, wx, wt)
            if raw < best:
                best = raw
                for t in range(nt):
                    for y in range(ny):
                        for x in range(nx):
                            ubest[t, y, x] = u[t, y, x]
            if fabs(raw - prev_raw) <= tol * max(fabs(prev_raw), 1e-300):
                stall += 1
                if stall >= TV_STALL_ITERS:
                    done = True
            else:
                stall = 0
            prev_raw = raw
        history.append(best)
        if done:
            break
    return ubest_arr, history
