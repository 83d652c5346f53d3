"""Compiled inner loops for the Metropolis-within-Gibbs sweeps.

Link arguments are passed as a ``(4, N)`` array (log part of rho, stationary
part of rho, log part of lambda, stationary part of lambda).  Random numbers
are drawn by the caller so that a chain is fully determined by its numpy
generator.  Log-likelihood terms that do not involve ``mu`` are left out of
the row and cell sums; they cancel in every acceptance ratio except for
``psi`` moves, which use :func:`nb_constant`.
"""

import math

import numpy as np
from numba import njit

CAP = 30.0
NEG_INF = -np.inf


@njit(cache=True)
def _stat(b, signed):
    if signed:
        return math.tanh(0.5 * b)
    if b >= 0.0:
        return 1.0 / (1.0 + math.exp(-b))
    e = math.exp(b)
    return e / (1.0 + e)


@njit(cache=True)
def _cell(y, mu, psi):
    return y * math.log(mu) - (y + psi) * math.log(mu + psi)


@njit(cache=True)
def link_cache(args, signed):
    """Exponentiated log parts and transformed stationary parts, ``(4, N)``."""
    n = args.shape[1]
    out = np.empty((4, n))
    for i in range(n):
        out[0, i] = math.exp(min(args[0, i], CAP))
        out[1, i] = _stat(args[1, i], signed)
        out[2, i] = math.exp(min(args[2, i], CAP))
        out[3, i] = _stat(args[3, i], signed)
    return out


@njit(cache=True)
def cap_ok(args, has_log):
    if not has_log:
        return True
    for i in range(args.shape[1]):
        if args[0, i] > CAP or args[2, i] > CAP:
            return False
    return True


@njit(cache=True)
def _row(i, er, sr, el, sl, omega, lin_i, delta, yobs, yprev, lag, psi):
    tot = 0.0
    for k in range(yobs.shape[1]):
        w = omega[k]
        mu = (w * er + (1.0 - w) * sr) * yprev[i, k] + (w * el + (1.0 - w) * sl) * lag[i, k]
        mu += math.exp(lin_i + delta[i, k + 1])
        if not (mu > 0.0) or mu == np.inf:
            return NEG_INF
        tot += _cell(yobs[i, k], mu, psi)
    return tot


@njit(cache=True)
def row_loglik(cache, omega, lin, delta, yobs, yprev, lag, psi):
    n = yobs.shape[0]
    out = np.empty(n)
    for i in range(n):
        out[i] = _row(i, cache[0, i], cache[1, i], cache[2, i], cache[3, i], omega, lin[i], delta, yobs, yprev, lag, psi)
    return out


@njit(cache=True)
def loglik_mu(args, omega, lin, delta, yobs, yprev, lag, psi, signed, has_log):
    """Sum of the ``mu``-dependent log-likelihood terms (``-inf`` if invalid)."""
    if not cap_ok(args, has_log):
        return NEG_INF
    cache = link_cache(args, signed)
    tot = 0.0
    for i in range(yobs.shape[0]):
        r = _row(i, cache[0, i], cache[1, i], cache[2, i], cache[3, i], omega, lin[i], delta, yobs, yprev, lag, psi)
        if r == NEG_INF:
            return NEG_INF
        tot += r
    return tot


@njit(cache=True)
def nb_constant(yobs, psi):
    """``sum lgamma(y + psi) - lgamma(psi) + psi * log(psi)`` over cells."""
    tot = 0.0
    lg = math.lgamma(psi)
    lp = psi * math.log(psi)
    for i in range(yobs.shape[0]):
        for k in range(yobs.shape[1]):
            tot += math.lgamma(yobs[i, k] + psi) - lg + lp
    return tot


@njit(cache=True)
def pointwise_loglik(args, omega, lin, delta, yobs, yprev, lag, lgy1, psi, signed):
    cache = link_cache(args, signed)
    n, t1 = yobs.shape
    out = np.empty((n, t1))
    lg = math.lgamma(psi)
    lp = psi * math.log(psi)
    for i in range(n):
        er, sr, el, sl = cache[0, i], cache[1, i], cache[2, i], cache[3, i]
        for k in range(t1):
            w = omega[k]
            mu = (w * er + (1.0 - w) * sr) * yprev[i, k] + (w * el + (1.0 - w) * sl) * lag[i, k]
            mu += math.exp(lin[i] + delta[i, k + 1])
            y = yobs[i, k]
            if mu > 0.0:
                out[i, k] = math.lgamma(y + psi) - lg - lgy1[i, k] + lp + _cell(y, mu, psi)
            else:
                out[i, k] = NEG_INF
    return out


@njit(cache=True)
def _shifted_row(r, s, mask, args, omega, lin_r, delta, yobs, yprev, lag, psi, signed, cache):
    a0 = args[0, r] + s if mask[0] else args[0, r]
    a2 = args[2, r] + s if mask[2] else args[2, r]
    if (mask[0] and a0 > CAP) or (mask[2] and a2 > CAP):
        return NEG_INF
    er = math.exp(min(a0, CAP)) if mask[0] else cache[0, r]
    sr = _stat(args[1, r] + s, signed) if mask[1] else cache[1, r]
    el = math.exp(min(a2, CAP)) if mask[2] else cache[2, r]
    sl = _stat(args[3, r] + s, signed) if mask[3] else cache[3, r]
    return _row(r, er, sr, el, sl, omega, lin_r, delta, yobs, yprev, lag, psi)


@njit(cache=True)
def _refresh_cache(r, args, cache, signed):
    cache[0, r] = math.exp(min(args[0, r], CAP))
    cache[1, r] = _stat(args[1, r], signed)
    cache[2, r] = math.exp(min(args[2, r], CAP))
    cache[3, r] = _stat(args[3, r], signed)


@njit(cache=True)
def update_car_field(
    field, mask, args, icpt, omega, lin, delta, yobs, yprev, lag, psi, signed,
    indptr, indices, comp, comp_size, members_ptr, members, use_comp,
    tau, prior_var, scales, z, logu, accepted,
):
    """Single-site sweep over an autoregressive CAR field.

    The proposal moves site ``i`` along ``e_i - 1_C / n_C`` so the field stays
    centred in its component ``C``.  For components flagged in ``use_comp`` the
    intercepts fed by the field absorb the mean shift ``d / n_C``; then only
    row ``i`` and rows outside ``C`` see a changed link argument.
    """
    n = field.shape[0]
    cache = link_cache(args, signed)
    rll = row_loglik(cache, omega, lin, delta, yobs, yprev, lag, psi)
    tmp = np.empty(n)
    for i in range(n):
        accepted[i] = False
        c = comp[i]
        nc = comp_size[c]
        if nc < 2:
            continue
        deg = indptr[i + 1] - indptr[i]
        d = scales[i] / math.sqrt(tau * deg) * z[i]
        nbsum = 0.0
        for p in range(indptr[i], indptr[i + 1]):
            nbsum += field[i] - field[indices[p]]
        dlp = -0.5 * tau * (2.0 * d * nbsum + d * d * deg)
        inv_n = 1.0 / nc
        if use_comp[c]:
            s_out = d * inv_n
            for k in range(4):
                if mask[k]:
                    dlp -= ((icpt[k] + s_out) ** 2 - icpt[k] ** 2) / (2.0 * prior_var)
            new_i = _shifted_row(i, d, mask, args, omega, lin[i], delta, yobs, yprev, lag, psi, signed, cache)
            if new_i == NEG_INF:
                continue
            tmp[i] = new_i
            dll = new_i - rll[i]
            ok = True
            for r in range(n):
                if comp[r] != c:
                    v = _shifted_row(r, s_out, mask, args, omega, lin[r], delta, yobs, yprev, lag, psi, signed, cache)
                    if v == NEG_INF:
                        ok = False
                        break
                    tmp[r] = v
                    dll += v - rll[r]
            if not ok:
                continue
            if logu[i] < dll + dlp:
                accepted[i] = True
                for p in range(members_ptr[c], members_ptr[c + 1]):
                    field[members[p]] -= s_out
                field[i] += d
                for k in range(4):
                    if mask[k]:
                        icpt[k] += s_out
                for r in range(n):
                    if r == i:
                        shift = d
                    elif comp[r] != c:
                        shift = s_out
                    else:
                        continue
                    for k in range(4):
                        if mask[k]:
                            args[k, r] += shift
                    _refresh_cache(r, args, cache, signed)
                    rll[r] = tmp[r]
        else:
            s_i = d * (1.0 - inv_n)
            s_o = -d * inv_n
            new_i = _shifted_row(i, s_i, mask, args, omega, lin[i], delta, yobs, yprev, lag, psi, signed, cache)
            if new_i == NEG_INF:
                continue
            tmp[i] = new_i
            dll = new_i - rll[i]
            ok = True
            for p in range(members_ptr[c], members_ptr[c + 1]):
                r = members[p]
                if r == i:
                    continue
                v = _shifted_row(r, s_o, mask, args, omega, lin[r], delta, yobs, yprev, lag, psi, signed, cache)
                if v == NEG_INF:
                    ok = False
                    break
                tmp[r] = v
                dll += v - rll[r]
            if not ok:
                continue
            if logu[i] < dll + dlp:
                accepted[i] = True
                for p in range(members_ptr[c], members_ptr[c + 1]):
                    r = members[p]
                    shift = s_i if r == i else s_o
                    field[r] += shift
                    for k in range(4):
                        if mask[k]:
                            args[k, r] += shift
                    _refresh_cache(r, args, cache, signed)
                    rll[r] = tmp[r]


@njit(cache=True)
def update_u_field(
    u, lin, delta, cache, omega, yobs, yprev, lag, psi,
    indptr, indices, comp, comp_size, members_ptr, members,
    tau, init_var, scales, z, logu, accepted,
):
    """Single-site sweep over the endemic CAR field ``u``.

    Moving ``u`` along ``e_i - 1_C / n_C`` and shifting every delta row in
    ``C`` by ``d / n_C`` leaves ``u_r + delta_rt`` unchanged except in row
    ``i``.  ``lin`` holds ``x * beta + u`` and is kept in sync.
    """
    n = u.shape[0]
    t_all = delta.shape[1]
    for i in range(n):
        accepted[i] = False
        c = comp[i]
        nc = comp_size[c]
        if nc < 2:
            continue
        deg = indptr[i + 1] - indptr[i]
        d = scales[i] / math.sqrt(tau * deg) * z[i]
        nbsum = 0.0
        for p in range(indptr[i], indptr[i + 1]):
            nbsum += u[i] - u[indices[p]]
        dlp = -0.5 * tau * (2.0 * d * nbsum + d * d * deg)
        s = d / nc
        for p in range(members_ptr[c], members_ptr[c + 1]):
            r = members[p]
            dlp -= ((delta[r, 0] + s) ** 2 - delta[r, 0] ** 2) / (2.0 * init_var)
        old = _row(i, cache[0, i], cache[1, i], cache[2, i], cache[3, i], omega, lin[i], delta, yobs, yprev, lag, psi)
        new = _row(i, cache[0, i], cache[1, i], cache[2, i], cache[3, i], omega, lin[i] + d, delta, yobs, yprev, lag, psi)
        if new == NEG_INF:
            continue
        if logu[i] < new - old + dlp:
            accepted[i] = True
            for p in range(members_ptr[c], members_ptr[c + 1]):
                r = members[p]
                u[r] -= s
                lin[r] -= s
                for t in range(t_all):
                    delta[r, t] += s
            u[i] += d
            lin[i] += d


@njit(cache=True)
def update_delta_sites(delta, lin, cache, omega, yobs, yprev, lag, psi, sigma2, init_var, scales, z, logu, accepted):
    """Single-site random-walk sweep over every ``delta_it``."""
    n, t_all = delta.shape
    sd_end = math.sqrt(sigma2)
    sd_mid = math.sqrt(0.5 * sigma2)
    if t_all > 1:
        sd_first = 1.0 / math.sqrt(1.0 / init_var + 1.0 / sigma2)
    else:
        sd_first = math.sqrt(init_var)
    for i in range(n):
        er, sr, el, sl = cache[0, i], cache[1, i], cache[2, i], cache[3, i]
        for t in range(t_all):
            if t == 0:
                sd = sd_first
            elif t == t_all - 1:
                sd = sd_end
            else:
                sd = sd_mid
            old = delta[i, t]
            new = old + scales[i, t] * sd * z[i, t]
            dlp = 0.0
            if t == 0:
                dlp -= (new * new - old * old) / (2.0 * init_var)
            else:
                prev = delta[i, t - 1]
                dlp -= ((new - prev) ** 2 - (old - prev) ** 2) / (2.0 * sigma2)
            if t < t_all - 1:
                nxt = delta[i, t + 1]
                dlp -= ((nxt - new) ** 2 - (nxt - old) ** 2) / (2.0 * sigma2)
            dll = 0.0
            if t >= 1:
                k = t - 1
                w = omega[k]
                ar = (w * er + (1.0 - w) * sr) * yprev[i, k] + (w * el + (1.0 - w) * sl) * lag[i, k]
                mu_old = ar + math.exp(lin[i] + old)
                mu_new = ar + math.exp(lin[i] + new)
                if not (mu_new > 0.0) or mu_new == np.inf:
                    accepted[i, t] = False
                    continue
                dll = _cell(yobs[i, k], mu_new, psi) - _cell(yobs[i, k], mu_old, psi)
            if logu[i, t] < dll + dlp:
                delta[i, t] = new
                accepted[i, t] = True
            else:
                accepted[i, t] = False


@njit(cache=True)
def update_delta_rows(delta, lin, cache, omega, yobs, yprev, lag, psi, init_var, scales, z, logu, accepted):
    """Shift a whole delta row by a common amount (random-walk steps unchanged)."""
    n = delta.shape[0]
    for i in range(n):
        d = scales[i] * z[i]
        old = _row(i, cache[0, i], cache[1, i], cache[2, i], cache[3, i], omega, lin[i], delta, yobs, yprev, lag, psi)
        new = _row(i, cache[0, i], cache[1, i], cache[2, i], cache[3, i], omega, lin[i] + d, delta, yobs, yprev, lag, psi)
        accepted[i] = False
        if new == NEG_INF:
            continue
        dlp = -((delta[i, 0] + d) ** 2 - delta[i, 0] ** 2) / (2.0 * init_var)
        if logu[i] < new - old + dlp:
            accepted[i] = True
            for t in range(delta.shape[1]):
                delta[i, t] += d


@njit(cache=True)
def _row_from(i, k0, cache, omega, lin_i, shift, delta, yobs, yprev, lag, psi):
    tot = 0.0
    for k in range(k0, yobs.shape[1]):
        w = omega[k]
        mu = (w * cache[0, i] + (1.0 - w) * cache[1, i]) * yprev[i, k]
        mu += (w * cache[2, i] + (1.0 - w) * cache[3, i]) * lag[i, k]
        mu += math.exp(lin_i + delta[i, k + 1] + shift)
        if not (mu > 0.0) or mu == np.inf:
            return NEG_INF
        tot += _cell(yobs[i, k], mu, psi)
    return tot


@njit(cache=True)
def update_delta_tails(delta, lin, cache, omega, yobs, yprev, lag, psi, sigma2, starts, scales, z, logu, accepted):
    """Shift ``delta[i, s:]`` jointly; only the step into period ``s`` changes."""
    n = delta.shape[0]
    for i in range(n):
        s = starts[i]
        d = scales[i] * z[i]
        old = _row_from(i, s - 1, cache, omega, lin[i], 0.0, delta, yobs, yprev, lag, psi)
        new = _row_from(i, s - 1, cache, omega, lin[i], d, delta, yobs, yprev, lag, psi)
        accepted[i] = False
        if new == NEG_INF:
            continue
        step = delta[i, s] - delta[i, s - 1]
        dlp = -((step + d) ** 2 - step**2) / (2.0 * sigma2)
        if logu[i] < new - old + dlp:
            accepted[i] = True
            for t in range(s, delta.shape[1]):
                delta[i, t] += d


@njit(cache=True)
def _column(k, w, cache, lin, delta, yobs, yprev, lag, psi):
    tot = 0.0
    for i in range(yobs.shape[0]):
        mu = (w * cache[0, i] + (1.0 - w) * cache[1, i]) * yprev[i, k]
        mu += (w * cache[2, i] + (1.0 - w) * cache[3, i]) * lag[i, k]
        mu += math.exp(lin[i] + delta[i, k + 1])
        if not (mu > 0.0) or mu == np.inf:
            return NEG_INF
        tot += _cell(yobs[i, k], mu, psi)
    return tot


@njit(cache=True)
def update_omega(omega, q1, q2, cache, lin, delta, yobs, yprev, lag, psi, scales, z, logu, accepted):
    """Logit-scale random walk on each ``omega_t`` (Beta prior plus Jacobian)."""
    for k in range(omega.shape[0]):
        w = omega[k]
        h = math.log(w) - math.log1p(-w)
        h_new = h + scales[k] * z[k]
        if h_new >= 0.0:
            w_new = 1.0 / (1.0 + math.exp(-h_new))
        else:
            e = math.exp(h_new)
            w_new = e / (1.0 + e)
        accepted[k] = False
        if not (0.0 < w_new < 1.0):
            continue
        old = _column(k, w, cache, lin, delta, yobs, yprev, lag, psi)
        new = _column(k, w_new, cache, lin, delta, yobs, yprev, lag, psi)
        if new == NEG_INF:
            continue
        dlp = q1[k] * (math.log(w_new) - math.log(w)) + q2[k] * (math.log1p(-w_new) - math.log1p(-w))
        if logu[k] < new - old + dlp:
            omega[k] = w_new
            accepted[k] = True
