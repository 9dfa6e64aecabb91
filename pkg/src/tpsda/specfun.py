"""
Log-domain modified Bessel function of the first kind and the Von Mises-Fisher
normalizers built on it.

Everything is evaluated through the exponentially scaled quantity

    log_ive(nu, k) = log I_nu(k) - k

so that nothing overflows for large concentrations. Three regimes are used:

    - power series, summed in the log domain (small k relative to nu)
    - Hankel large-argument expansion (small nu, large k)
    - Debye uniform asymptotic expansion (large nu, any k > 0)

The ratio I_{nu+1}/I_nu is evaluated separately, by continued fraction, since
it is needed close to 1 where differencing two logs loses precision.
"""

from functools import lru_cache

import numpy as np
from numpy.polynomial import Polynomial
from scipy.special import gammaln, logsumexp

LOG2 = np.log(2.0)
LOG2PI = np.log(2.0 * np.pi)

# nu at or above this uses the Debye expansion everywhere
DEBYE_MIN_NU = 15.0
DEBYE_TERMS = 14
HANKEL_TERMS = 40


def _check_domain(nu, kappa):
    if not np.isscalar(nu) and np.ndim(nu) != 0:
        raise TypeError("nu must be a scalar")
    nu = float(nu)
    if not nu >= -0.5:
        raise ValueError(f"Bessel order must be >= -0.5, got {nu}")
    kappa = np.asarray(kappa, dtype=float)
    if np.any(kappa < 0) or np.any(np.isnan(kappa)):
        raise ValueError("Bessel argument must be non-negative")
    return nu, kappa


def _hankel_threshold(nu):
    # below this argument the series is used; above it the Hankel terms shrink fast
    return 40.0 + 1.5 * nu * nu


@lru_cache(maxsize=None)
def _debye_polynomials(n=DEBYE_TERMS):
    """U_k(p) for k < n, via U_{k+1} = p^2(1-p^2)U_k'/2 + (1/8) int_0^p (1-5t^2) U_k."""
    p = Polynomial([0.0, 1.0])
    u = [Polynomial([1.0])]
    for _ in range(n - 1):
        uk = u[-1]
        integrand = (Polynomial([1.0, 0.0, -5.0]) * uk).integ()
        u.append(0.5 * p**2 * (1 - p**2) * uk.deriv() + integrand / 8.0)
    return tuple(u)


def _series_log_ive(nu, k):
    """
    Power series sum_j (k/2)^(2j+nu) / (j! Gamma(j+nu+1)), in the log domain.

    Arguments are grouped by power-of-two magnitude and each group gets a term
    count fixed by its upper bound, so an element's value never depends on the
    other elements of the call.
    """
    out = np.empty_like(k)
    bucket = np.ceil(np.log2(np.maximum(k, 1.0))).astype(int)
    for b in np.unique(bucket):
        sel = bucket == b
        out[sel] = _series_chunk(nu, k[sel], 2.0**b)
    return out


def _series_chunk(nu, k, kbound):
    nterms = int(kbound / 2 + 12 * np.sqrt(kbound) + 40)
    j = np.arange(nterms, dtype=float)
    den = gammaln(j + 1) + gammaln(j + nu + 1)
    logh = np.log(k / 2)
    out = np.empty_like(k)
    step = max(1, 2**21 // nterms)
    for lo in range(0, k.size, step):
        sl = slice(lo, lo + step)
        # reduce along the contiguous axis so every row is summed the same way
        terms = (2 * j + nu) * logh[sl, None] - den
        out[sl] = logsumexp(terms, axis=1) - k[sl]
    return out


def _hankel_sum(nu, k):
    """sum_j (-1)^j a_j(nu) / k^j, truncated at the smallest term."""
    mu = 4.0 * nu * nu
    total = np.ones_like(k)
    term = np.ones_like(k)
    active = np.ones(k.shape, dtype=bool)
    for j in range(1, HANKEL_TERMS):
        nxt = -term * (mu - (2 * j - 1) ** 2) / (8.0 * j * k)
        # asymptotic series: stop each element once terms start growing or stop mattering
        active &= (np.abs(nxt) < np.abs(term)) & (np.abs(term) > 1e-17 * np.abs(total))
        term = np.where(active, nxt, 0.0)
        total = total + term
        if not active.any():
            break
    return total


def _hankel_log_ive(nu, k):
    return -0.5 * (LOG2PI + np.log(k)) + np.log(_hankel_sum(nu, k))


def _debye_log_ive(nu, k):
    z = k / nu
    root = np.sqrt(1.0 + z * z)
    p = 1.0 / root
    # nu*eta - k, with eta = sqrt(1+z^2) - asinh(1/z), arranged without cancellation
    expo = nu / (root + z) - nu * np.arcsinh(1.0 / z)
    polys = _debye_polynomials()
    acc = np.zeros_like(k)
    for uk in reversed(polys[1:]):
        acc = (acc + uk(p)) / nu
    return expo - 0.5 * (LOG2PI + np.log(nu)) - 0.25 * np.log1p(z * z) + np.log1p(acc)


def log_ive(nu, kappa):
    """
    Exponentially scaled log Bessel-I: log I_nu(kappa) - kappa.

    kappa may be an array; nu is a scalar >= -1/2. At kappa = 0 the result is
    0 for nu = 0, -inf for nu > 0 and +inf for nu = -1/2.
    """
    nu, k = _check_domain(nu, kappa)
    scalar = k.ndim == 0
    k = np.atleast_1d(k)
    out = np.empty_like(k)

    zero = k == 0
    if nu == 0:
        out[zero] = 0.0
    else:
        out[zero] = np.inf if nu < 0 else -np.inf

    pos = ~zero
    if nu >= DEBYE_MIN_NU:
        out[pos] = _debye_log_ive(nu, k[pos])
    else:
        small = pos & (k <= _hankel_threshold(nu))
        large = pos & ~small
        if small.any():
            out[small] = _series_log_ive(nu, k[small])
        if large.any():
            out[large] = _hankel_log_ive(nu, k[large])
    return out[0] if scalar else out


def log_bessel_i(nu, kappa):
    """log I_nu(kappa) for nu >= -1/2 and kappa >= 0."""
    k = np.asarray(kappa, dtype=float)
    return log_ive(nu, k) + k


SMALL_KAPPA = 1.0


def log_cbar(nu, kappa):
    """
    log of the scaled VMF normalizer,

        log Cbar_nu(k) = k + nu*log(k) - log I_nu(k),

    finite for all k >= 0, with the limit nu*log(2) + lgamma(nu+1) at k = 0.
    """
    nu, k = _check_domain(nu, kappa)
    scalar = k.ndim == 0
    k = np.atleast_1d(k)
    out = np.full(k.shape, nu * LOG2 + gammaln(nu + 1))
    small = (k > 0) & (k <= SMALL_KAPPA)
    if small.any():
        # nu*log(k) and log I_nu(k) cancel here; use the series relative to its leading term
        ks = k[small]
        out[small] = ks + nu * LOG2 + gammaln(nu + 1) - _log_series_ratio(nu, ks)
    pos = k > SMALL_KAPPA
    if pos.any():
        kp = k[pos]
        out[pos] = nu * np.log(kp) - log_ive(nu, kp)
    return out[0] if scalar else out


def _log_series_ratio(nu, k):
    """log of I_nu(k) / ((k/2)^nu / Gamma(nu+1)) = log sum_j (k^2/4)^j / (j! (nu+1)_j), for k <= 1."""
    q = k * k / 4
    term = np.ones_like(k)
    rest = np.zeros_like(k)
    for j in range(1, 30):
        term = term * q / (j * (nu + j))
        rest = rest + term
    return np.log1p(rest)


def log_cvmf(nu, kappa):
    """log C_nu(k) = nu*log(k) - log I_nu(k); the unscaled VMF normalizer."""
    k = np.asarray(kappa, dtype=float)
    return log_cbar(nu, k) - k


def _ratio_cf(nu, k, max_terms):
    """Modified Lentz evaluation of I_{nu+1}(k)/I_nu(k) = 1/(b_1 + 1/(b_2 + ...)), b_j = 2(nu+j)/k."""
    # leading term b_0 = 0 is represented by tiny
    tiny = 1e-300
    f = np.full(k.shape, tiny)
    c = f.copy()
    d = np.zeros_like(k)
    done = np.zeros(k.shape, dtype=bool)
    for j in range(1, max_terms + 1):
        b = 2.0 * (nu + j) / k
        d = b + d
        d = np.where(d == 0, tiny, d)
        c = b + 1.0 / c
        c = np.where(c == 0, tiny, c)
        d = 1.0 / d
        delta = c * d
        f = np.where(done, f, f * delta)
        done |= np.abs(delta - 1.0) < 1e-16
        if done.all():
            break
    return f


# beyond this argument the continued fraction needs too many terms
CF_MAX_KAPPA = 2.0e3


def bessel_ratio(nu, kappa):
    """
    A(k) = I_{nu+1}(k) / I_nu(k), the mean resultant length of a VMF with
    concentration k in dimension 2*nu + 2. A(0) = 0 and A increases to 1.
    """
    nu, k = _check_domain(nu, kappa)
    scalar = k.ndim == 0
    k = np.atleast_1d(k)
    if nu == -0.5:
        # I_{1/2} / I_{-1/2} = tanh exactly
        out = np.tanh(k)
        return out[0] if scalar else out
    out = np.zeros_like(k)
    cf = (k > 0) & (k <= CF_MAX_KAPPA)
    if cf.any():
        kc = k[cf]
        nterms = int(20 + 8 * np.sqrt(np.max(kc)) + np.max(kc) / 4)
        out[cf] = _ratio_cf(nu, kc, nterms)
    big = k > CF_MAX_KAPPA
    if big.any():
        kb = k[big]
        if nu >= DEBYE_MIN_NU:
            out[big] = np.exp(_debye_log_ive(nu + 1, kb) - _debye_log_ive(nu, kb))
        else:
            out[big] = _hankel_sum(nu + 1, kb) / _hankel_sum(nu, kb)
    # rounding can land one ulp above 1 once A has saturated
    np.minimum(out, 1.0, out=out)
    return out[0] if scalar else out
