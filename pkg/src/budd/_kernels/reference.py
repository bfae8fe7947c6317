"""Pure-Python reference implementations of the hot per-pixel kernels.

The compiled extension (``budd._kernels._core``) mirrors this module
operation for operation: same expression shapes, same evaluation order, same
float64 intermediates, libm transcendentals on both sides. Tile results must
be bit-identical across backends and equal to the scalar APIs, so any change
here has to land in the .pyx file too.

Kernels:
    fit_pixels      median / population-std Gaussian fit per pixel
    detect_pixels   Bayesian alert state machine over fused daily steps
    tv_solve        monotone primal-dual total-variation denoise
"""
from __future__ import annotations

import math

import numpy as np

# sqrt(2*pi) as a literal so both backends share the exact double.
SQRT_2PI = 2.5066282746310002
PDF_FLOOR = 1e-300

TAG_MONITORING = 0
TAG_FLAGGED = 1
TAG_DEFORESTED = 2

# Consecutive sub-tol objective changes required before the TV solver stops.
TV_STALL_ITERS = 5


def fit_pixels(values, valid, sigma_min, min_obs):
    """Fit per-pixel Gaussians over the time axis.

    values: float32 (T, N) C-contiguous, valid: uint8 (T, N). Valid samples
    are gathered in time order; mu is the median (mean of the two middle
    order statistics for even counts), sigma the population standard
    deviation from sequential two-pass sums, floored at sigma_min.

    Returns (mu float64[N], sigma float64[N], count int32[N]); mu and sigma
    are NaN where count < min_obs. Caller must pre-mask non-finite values.
    """
    _, n = values.shape
    mu = np.full(n, np.nan)
    sg = np.full(n, np.nan)
    counts = np.zeros(n, dtype=np.int32)

    vals_t = np.ascontiguousarray(values.T)
    valid_t = np.ascontiguousarray(valid.T)
    for i in range(n):
        sample = vals_t[i][valid_t[i] != 0].astype(np.float64).tolist()
        c = len(sample)
        counts[i] = c
        if c < min_obs:
            continue
        srt = sorted(sample)
        h = c >> 1
        if c & 1:
            med = srt[h]
        else:
            med = (srt[h - 1] + srt[h]) / 2.0
        total = 0.0
        for v in sample:
            total += v
        mean = total / c
        acc = 0.0
        for v in sample:
            d = v - mean
            acc += d * d
        sd = math.sqrt(acc / c)
        if sd < sigma_min:
            sd = sigma_min
        mu[i] = med
        sg[i] = sd
    return mu, sg, counts


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
    flag,
    confirm,
    clear,
    prior,
    min_obs,
):
    """Run the per-pixel Bayesian alert state machine over fused daily steps.

    dates: int32[S] epoch days, strictly increasing. For modality slot m in
    (0, 1, 2), rows[m][starts[m][s]:starts[m][s+1]] are the scene rows of
    vals[m] (float32 (T_m, N)) acquired on step s; valids[m] is uint8 of the
    same shape. Model parameters are float64[N] per slot; modeled[m] is
    uint8[N]. Absent modalities pass empty (0, N) stacks.

    Same-day values of every modeled modality (slot order, then scene order)
    are fused into one joint Bayes update; running likelihood products are
    floored at PDF_FLOOR so the posterior can never become NaN. A step with
    no usable value leaves the pixel untouched.

    Returns (tag uint8[N], posterior float64[N], obs_count int32[N],
    flag_day int32[N], confirm_day int32[N], modality_bits uint8[N]);
    day fields are -1 when unset.
    """
    nsteps = len(dates)
    n = mu_f.shape[1]
    tag = np.zeros(n, dtype=np.uint8)
    post = np.zeros(n)
    count = np.zeros(n, dtype=np.int32)
    flag_day = np.full(n, -1, dtype=np.int32)
    confirm_day = np.full(n, -1, dtype=np.int32)
    modbits = np.zeros(n, dtype=np.uint8)

    dates_py = [int(d) for d in dates]
    starts_py = [[int(v) for v in starts[m]] for m in range(3)]
    rows_py = [[int(v) for v in rows[m]] for m in range(3)]
    mu_f_py = [mu_f[m].tolist() for m in range(3)]
    sigma_py = [sigma[m].tolist() for m in range(3)]
    mu_nf_py = [mu_nf[m].tolist() for m in range(3)]
    modeled_py = [modeled[m].tolist() for m in range(3)]

    exp = math.exp
    for i in range(n):
        is_mod = (modeled_py[0][i], modeled_py[1][i], modeled_py[2][i])
        if not (is_mod[0] or is_mod[1] or is_mod[2]):
            continue
        cols = [None, None, None]
        vcols = [None, None, None]
        for m in range(3):
            if is_mod[m] and vals[m].shape[0] > 0:
                cols[m] = vals[m][:, i].astype(np.float64).tolist()
                vcols[m] = valids[m][:, i].tolist()

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
                col = cols[m]
                if col is None:
                    continue
                vc = vcols[m]
                muf = mu_f_py[m][i]
                sd = sigma_py[m][i]
                munf = mu_nf_py[m][i]
                rw = rows_py[m]
                for k in range(starts_py[m][s], starts_py[m][s + 1]):
                    t = rw[k]
                    if vc[t] == 0:
                        continue
                    x = col[t]
                    z = (x - muf) / sd
                    pf = exp(-0.5 * z * z) / (sd * SQRT_2PI)
                    if pf < PDF_FLOOR:
                        pf = PDF_FLOOR
                    z = (x - munf) / sd
                    pn = exp(-0.5 * z * z) / (sd * SQRT_2PI)
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
                    t_flag = dates_py[s]
                    t_bits = used
            else:  # flagged
                num = lnf * t_post
                p1 = num / (num + lf * (1.0 - t_post))
                t_count += 1
                t_bits |= used
                if p1 > confirm and t_count >= min_obs:
                    t_tag = TAG_DEFORESTED
                    t_post = p1
                    t_conf = dates_py[s]
                    break
                elif p1 < clear:
                    t_tag = TAG_MONITORING
                    t_post = 0.0
                    t_count = 0
                    t_flag = -1
                    t_bits = 0
                else:
                    t_post = p1

        tag[i] = t_tag
        post[i] = t_post
        count[i] = t_count
        flag_day[i] = t_flag
        confirm_day[i] = t_conf
        modbits[i] = t_bits
    return tag, post, count, flag_day, confirm_day, modbits


def _tv_objective(u, f, w, lam, wx, wt):
    r = u - f
    fid = 0.5 * float(np.sum(w * r * r))
    tv = wt * float(np.sum(np.abs(u[1:] - u[:-1])))
    tv += wx * float(np.sum(np.abs(u[:, 1:, :] - u[:, :-1, :])))
    tv += wx * float(np.sum(np.abs(u[:, :, 1:] - u[:, :, :-1])))
    return fid + lam * tv


def tv_solve(f, w, lam, wx, wt, max_iters, tol):
    """Approximately minimize the weighted-fidelity anisotropic TV objective

        F(u) = 0.5*sum(w*(u-f)^2)
             + lam*sum(wt*|dt u| + wx*|dy u| + wx*|dx u|)

    (forward differences, Neumann boundaries) with a primal-dual iteration.
    The reported iterate is the best objective seen so far, so the returned
    history is non-increasing by construction; iteration stops at max_iters
    or once the raw objective change stays below tol (relative) for
    TV_STALL_ITERS consecutive iterations.

    f, w: float64 (T, H, W); w is 1 on valid pixels, 0 on pixels excluded
    from the fidelity term (their values are inpainted from neighbors).
    Returns (u_best, history) with history[0] = F(f).
    """
    f = np.asarray(f, dtype=np.float64)
    start_obj = _tv_objective(f, f, w, lam, wx, wt)
    history = [start_obj]
    if lam == 0.0 or f.size == 0 or float(np.min(f)) == float(np.max(f)):
        return f.copy(), history

    lnorm = math.sqrt(4.0 * (wt * wt + 2.0 * wx * wx))
    tau = 1.0 / lnorm
    sig = 1.0 / lnorm

    u = f.copy()
    ub = f.copy()
    pt = np.zeros((max(f.shape[0] - 1, 0),) + f.shape[1:])
    py = np.zeros((f.shape[0], max(f.shape[1] - 1, 0), f.shape[2]))
    px = np.zeros(f.shape[:2] + (max(f.shape[2] - 1, 0),))
    div = np.empty_like(f)
    tauwf = tau * w * f
    denom = 1.0 + tau * w

    best = start_obj
    u_best = f.copy()
    prev_raw = start_obj
    stall = 0
    for _ in range(max_iters):
        pt += (sig * wt) * (ub[1:] - ub[:-1])
        np.clip(pt, -lam, lam, out=pt)
        py += (sig * wx) * (ub[:, 1:, :] - ub[:, :-1, :])
        np.clip(py, -lam, lam, out=py)
        px += (sig * wx) * (ub[:, :, 1:] - ub[:, :, :-1])
        np.clip(px, -lam, lam, out=px)

        div.fill(0.0)
        div[:-1] -= wt * pt
        div[1:] += wt * pt
        div[:, :-1, :] -= wx * py
        div[:, 1:, :] += wx * py
        div[:, :, :-1] -= wx * px
        div[:, :, 1:] += wx * px

        unew = (u - tau * div + tauwf) / denom
        np.multiply(unew, 2.0, out=ub)
        ub -= u
        u = unew

        raw = _tv_objective(u, f, w, lam, wx, wt)
        if raw < best:
            best = raw
            u_best = u.copy()
        history.append(best)

        if abs(raw - prev_raw) <= tol * max(abs(prev_raw), 1e-300):
            stall += 1
            if stall >= TV_STALL_ITERS:
                break
        else:
            stall = 0
        prev_raw = raw
    return u_best, history
