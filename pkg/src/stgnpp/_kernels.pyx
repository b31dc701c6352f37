# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled scalar kernels for the synthetic generator and its oracle.

Operation order matches ``_kernels_py`` exactly; see that module for the
reference semantics.
"""
from libc.math cimport exp, log, sqrt, cos, floor, INFINITY, M_PI

cdef int SLOTS_PER_HOUR = 12
cdef int SLOTS_PER_DAY = 288
cdef double BOUND_RTOL = 1e-9


class BoundViolation(RuntimeError):
    pass


cdef inline long _segment_of(double t) nogil:
    cdef long k = <long>floor(t * SLOTS_PER_HOUR)
    if (k + 1) / <double>SLOTS_PER_HOUR <= t:
        k += 1
    elif k / <double>SLOTS_PER_HOUR > t:
        k -= 1
    return k


cdef inline long _pmod(long k, long m) nogil:
    cdef long r = k % m
    if r < 0:
        r += m
    return r


def thin_chunk(const double[:, :] U, double t, long k, double horizon,
               const double[:] mu, const double[:] prof, double beta, double gamma,
               double[:] exc, double[:] busy,
               const long[:] nbr_ptr, const long[:] nbr_idx, bint block,
               double dur_mu, double dur_sigma, double peak_mult, const unsigned char[:] peak,
               long[:] out_link, double[:] out_t, double[:] out_d):
    cdef Py_ssize_t n_links = mu.shape[0]
    cdef Py_ssize_t n_rows = U.shape[0]
    cdef Py_ssize_t cap = out_t.shape[0]
    cdef Py_ssize_t j = 0, n_out = 0, n, q
    cdef double seg_end, nb, p, total, dt, decay, target, acc, bound, lam, z, dur
    cdef long chosen
    cdef double[:] bounds = (<object>exc).copy()
    while j < n_rows:
        if t >= horizon:
            return t, k, j, n_out, True
        if n_out >= cap:
            return t, k, j, n_out, False
        seg_end = (k + 1) / <double>SLOTS_PER_HOUR
        nb = seg_end if seg_end < horizon else horizon
        p = prof[_pmod(k, SLOTS_PER_DAY)]
        total = 0.0
        for n in range(n_links):
            if block and busy[n] > t:
                bounds[n] = 0.0
                if busy[n] < nb:
                    nb = busy[n]
            else:
                bounds[n] = mu[n] * p * (1.0 + beta * exc[n])
                total += bounds[n]
        j += 1
        if total > 0.0:
            dt = -log(1.0 - U[j - 1, 0]) / total
        else:
            dt = INFINITY
        if t + dt >= nb:
            decay = exp(-gamma * (nb - t))
            for n in range(n_links):
                exc[n] *= decay
            t = nb
            if t >= seg_end:
                k += 1
            continue
        decay = exp(-gamma * dt)
        for n in range(n_links):
            exc[n] *= decay
        t = t + dt
        target = U[j - 1, 1] * total
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
        if U[j - 1, 2] * bound < lam:
            z = sqrt(-2.0 * log(1.0 - U[j - 1, 3])) * cos(2.0 * M_PI * U[j - 1, 4])
            dur = exp(dur_mu + dur_sigma * z) / 60.0
            if peak[_pmod(k, SLOTS_PER_DAY)]:
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


cdef double _excitation_before(double t, double gamma, const double[:] nbr) nogil:
    cdef double e = 0.0
    cdef Py_ssize_t i
    for i in range(nbr.shape[0]):
        if nbr[i] >= t:
            break
        e += exp(-gamma * (t - nbr[i]))
    return e


def excitation_before(double t, double gamma, const double[:] nbr):
    return _excitation_before(t, gamma, nbr)


cdef double _hazard_integral(double a, double b, double mu, const double[:] prof,
                             double beta, double gamma, const double[:] nbr,
                             const double[:] bs, const double[:] be) nogil:
    if b <= a:
        return 0.0
    cdef Py_ssize_t n_nbr = nbr.shape[0]
    cdef Py_ssize_t n_busy = bs.shape[0]
    cdef double E = 0.0
    cdef Py_ssize_t i = 0, j = 0
    cdef long k
    cdef double u, v, total, seg_end, dt, decay
    cdef bint busy_now
    while i < n_nbr and nbr[i] < a:
        E += exp(-gamma * (a - nbr[i]))
        i += 1
    while j < n_busy and be[j] <= a:
        j += 1
    k = _segment_of(a)
    u = a
    total = 0.0
    while u < b:
        seg_end = (k + 1) / <double>SLOTS_PER_HOUR
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
        decay = exp(-gamma * dt)
        if not busy_now and dt > 0.0:
            total += mu * prof[_pmod(k, SLOTS_PER_DAY)] * (dt + beta * E * (1.0 - decay) / gamma)
        E *= decay
        u = v
        if u >= seg_end:
            k += 1
        while i < n_nbr and nbr[i] <= u:
            E += exp(-gamma * (u - nbr[i]))
            i += 1
        while j < n_busy and be[j] <= u:
            j += 1
    return total


def hazard_integral(double a, double b, double mu, const double[:] prof, double beta,
                    double gamma, const double[:] nbr, const double[:] bs, const double[:] be):
    return _hazard_integral(a, b, mu, prof, beta, gamma, nbr, bs, be)


def intensity_at(double t, double mu, const double[:] prof, double beta, double gamma,
                 const double[:] nbr, const double[:] bs, const double[:] be):
    cdef Py_ssize_t q
    for q in range(bs.shape[0]):
        if bs[q] < t <= be[q]:
            return 0.0
    cdef long k = _segment_of(t)
    return mu * prof[_pmod(k, SLOTS_PER_DAY)] * (1.0 + beta * _excitation_before(t, gamma, nbr))


def hazard_median(double t, double mu, const double[:] prof, double beta, double gamma,
                  const double[:] nbr, const double[:] bs, const double[:] be, double rtol):
    cdef double target = log(2.0)
    cdef double lo = 0.0, hi = 1.0, mid
    while _hazard_integral(t, t + hi, mu, prof, beta, gamma, nbr, bs, be) <= target:
        lo = hi
        hi *= 2.0
        if hi > 1e9:
            return INFINITY
    while hi - lo > rtol * hi:
        mid = 0.5 * (lo + hi)
        if _hazard_integral(t, t + mid, mu, prof, beta, gamma, nbr, bs, be) < target:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)
