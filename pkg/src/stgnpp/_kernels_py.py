"""Pure-Python scalar kernels for the synthetic generator and its oracle.

Mirrors ``_kernels.pyx`` operation for operation so that both backends produce
bit-identical results from the same uniform stream.
"""
import math

SLOTS_PER_HOUR = 12
SLOTS_PER_DAY = 288
# relative slack before an intensity above its bound counts as a sampler bug
BOUND_RTOL = 1e-9


class BoundViolation(RuntimeError):
    pass


def _segment_of(t):
    k = int(math.floor(t * SLOTS_PER_HOUR))
    if (k + 1) / SLOTS_PER_HOUR <= t:
        k += 1
    elif k / SLOTS_PER_HOUR > t:
        k -= 1
    return k


def thin_chunk(U, t, k, horizon, mu, prof, beta, gamma, exc, busy,
               nbr_ptr, nbr_idx, block, dur_mu, dur_sigma, peak_mult, peak,
               out_link, out_t, out_d):
    """Run Ogata thinning over all links jointly until ``U`` is used up.

    Returns ``(t, k, rows_used, n_out, done)``; ``exc`` and ``busy`` are
    updated in place. Each iteration consumes one row of ``U`` (5 uniforms).
    """
    exc_l = [float(x) for x in exc]
    busy_l = [float(x) for x in busy]
    res = _thin_chunk(
        U.tolist(), float(t), int(k), float(horizon), [float(x) for x in mu],
        [float(x) for x in prof], float(beta), float(gamma), exc_l, busy_l,
        [int(x) for x in nbr_ptr], [int(x) for x in nbr_idx], bool(block),
        float(dur_mu), float(dur_sigma), float(peak_mult), [bool(x) for x in peak],
        out_link, out_t, out_d)
    exc[:] = exc_l
    busy[:] = busy_l
    return res


def _thin_chunk(U, t, k, horizon, mu, prof, beta, gamma, exc, busy,
                nbr_ptr, nbr_idx, block, dur_mu, dur_sigma, peak_mult, peak,
                out_link, out_t, out_d):
    n_links = len(mu)
    n_rows = len(U)
    cap = len(out_t)
    j = 0
    n_out = 0
    bounds = [0.0] * n_links
    while j < n_rows:
        if t >= horizon:
            return t, k, j, n_out, True
        if n_out >= cap:
            return t, k, j, n_out, False
        seg_end = (k + 1) / SLOTS_PER_HOUR
        nb = seg_end if seg_end < horizon else horizon
        p = prof[k % SLOTS_PER_DAY]
        total = 0.0
        for n in range(n_links):
            if block and busy[n] > t:
                bounds[n] = 0.0
                if busy[n] < nb:
                    nb = busy[n]
            else:
                bounds[n] = mu[n] * p * (1.0 + beta * exc[n])
                total += bounds[n]
        row = U[j]
        j += 1
        if total > 0.0:
            dt = -math.log(1.0 - row[0]) / total
        else:
            dt = math.inf
        if t + dt >= nb:
            decay = math.exp(-gamma * (nb - t))
            for n in range(n_links):
                exc[n] *= decay
            t = nb
            if t >= seg_end:
                k += 1
            continue
        decay = math.exp(-gamma * dt)
        for n in range(n_links):
            exc[n] *= decay
        t = t + dt
        # pick the link whose bound segment contains row[1] * total
        target = row[1] * total
        acc = 0.0
        chosen = -1
        for n in range(n_links):
            if bounds[n] > 0.0:
                acc += bounds[n]
                chosen = n
                if target < acc:
                    break
        bound = bounds[chosen]
        lam = mu[chosen] * p * (1.0 + beta * exc[chosen])
        if lam > bound * (1.0 + BOUND_RTOL):
            raise BoundViolation(
                f"intensity {lam!r} exceeds thinning bound {bound!r} on link {chosen}")
        if row[2] * bound < lam:
            z = math.sqrt(-2.0 * math.log(1.0 - row[3])) * math.cos(2.0 * math.pi * row[4])
            dur = math.exp(dur_mu + dur_sigma * z) / 60.0
            if peak[k % SLOTS_PER_DAY]:
                dur *= peak_mult
            out_link[n_out] = chosen
            out_t[n_out] = t
            out_d[n_out] = dur
            n_out += 1
            if block:
                busy[chosen] = t + dur
            for q in range(nbr_ptr[chosen], nbr_ptr[chosen + 1]):
                exc[nbr_idx[q]] += 1.0
    return t, k, j, n_out, t >= horizon


def excitation_before(t, gamma, nbr):
    e = 0.0
    for s in nbr:
        if s >= t:
            break
        e += math.exp(-gamma * (t - s))
    return e


def hazard_integral(a, b, mu, prof, beta, gamma, nbr, bs, be):
    """Integral of one link's intensity over ``[a, b]`` (hours), piecewise exact."""
    if b <= a:
        return 0.0
    n_nbr = len(nbr)
    n_busy = len(bs)
    E = 0.0
    i = 0
    while i < n_nbr and nbr[i] < a:
        E += math.exp(-gamma * (a - nbr[i]))
        i += 1
    j = 0
    while j < n_busy and be[j] <= a:
        j += 1
    k = _segment_of(a)
    u = a
    total = 0.0
    while u < b:
        seg_end = (k + 1) / SLOTS_PER_HOUR
        v = b if b < seg_end else seg_end
        if i < n_nbr and nbr[i] < v:
            v = nbr[i]
        busy_now = False
        if j < n_busy:
            if bs[j] <= u:
                busy_now = True
                if be[j] < v:
                    v = be[j]
            elif bs[j] < v:
                v = bs[j]
        dt = v - u
        decay = math.exp(-gamma * dt)
        if not busy_now and dt > 0.0:
            total += mu * prof[k % SLOTS_PER_DAY] * (dt + beta * E * (1.0 - decay) / gamma)
        E *= decay
        u = v
        if u >= seg_end:
            k += 1
        while i < n_nbr and nbr[i] <= u:
            E += math.exp(-gamma * (u - nbr[i]))
            i += 1
        while j < n_busy and be[j] <= u:
            j += 1
    return total


def intensity_at(t, mu, prof, beta, gamma, nbr, bs, be):
    """Left-continuous intensity of one link at ``t`` (hours)."""
    for q in range(len(bs)):
        if bs[q] < t <= be[q]:
            return 0.0
    k = _segment_of(t)
    return mu * prof[k % SLOTS_PER_DAY] * (1.0 + beta * excitation_before(t, gamma, nbr))


def hazard_median(t, mu, prof, beta, gamma, nbr, bs, be, rtol):
    """Smallest tau with hazard_integral(t, t + tau) = ln 2, by bisection."""
    target = math.log(2.0)
    lo = 0.0
    hi = 1.0
    while hazard_integral(t, t + hi, mu, prof, beta, gamma, nbr, bs, be) <= target:
        lo = hi
        hi *= 2.0
        if hi > 1e9:
            return math.inf
    while hi - lo > rtol * hi:
        mid = 0.5 * (lo + hi)
        if hazard_integral(t, t + mid, mu, prof, beta, gamma, nbr, bs, be) < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)
