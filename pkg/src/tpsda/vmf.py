"""Von Mises-Fisher distribution on the unit hypersphere S^{d-1}, including d = 1."""

from dataclasses import dataclass, field

import numpy as np

from .specfun import LOG2PI, bessel_ratio, log_cbar

KAPPA_MAX = 1e8
UNIT_TOL = 1e-6


@dataclass(frozen=True)
class VmfParams:
    """
    Mean direction and concentration of a VMF.

    When kappa == 0 the distribution is uniform and ``mu`` is the first
    canonical basis vector with ``arbitrary_mu`` set; do not read meaning into
    it. ``capped`` marks ML fits whose concentration hit KAPPA_MAX.
    """

    mu: np.ndarray
    kappa: float
    arbitrary_mu: bool = False
    capped: bool = False
    dim: int = field(init=False)

    def __post_init__(self):
        mu = np.array(self.mu, dtype=float).ravel()
        if mu.size < 1:
            raise ValueError("mean direction must have at least one entry")
        if abs(np.linalg.norm(mu) - 1.0) > 1e-9:
            raise ValueError(f"mean direction must be unit norm, got norm {np.linalg.norm(mu)}")
        if not self.kappa >= 0:
            raise ValueError(f"concentration must be >= 0, got {self.kappa}")
        mu.flags.writeable = False
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "kappa", float(self.kappa))
        object.__setattr__(self, "dim", mu.size)

    @classmethod
    def from_natural(cls, a):
        a = np.asarray(a, dtype=float).ravel()
        kappa = float(np.linalg.norm(a))
        if kappa == 0:
            return cls(canonical(a.size), 0.0, arbitrary_mu=True)
        return cls(a / kappa, kappa)

    @property
    def natural(self):
        return self.kappa * self.mu

    @property
    def nu(self):
        return self.dim / 2 - 1


def canonical(d):
    e = np.zeros(d)
    e[0] = 1.0
    return e


def log_normalizer(d, kappa):
    """log of the density constant at mu'x = 1, i.e. log Cbar_nu(k) - (d/2) log 2pi."""
    if d == 1:
        # counting measure on {-1, +1}: P(x) = exp(k mu x - k) / (1 + exp(-2k))
        kappa = np.asarray(kappa, dtype=float)
        return -np.logaddexp(0.0, -2.0 * kappa)
    return log_cbar(d / 2 - 1, kappa) - 0.5 * d * LOG2PI


def logpdf_natural(x, a):
    """
    log V(x | a) for rows of x and natural parameters a (broadcast over rows).

    Works for every d >= 1; for d = 1 it is the two-point probability mass.
    """
    x = np.asarray(x, dtype=float)
    a = np.asarray(a, dtype=float)
    d = x.shape[-1]
    k = np.linalg.norm(a, axis=-1)
    return log_normalizer(d, k) + np.sum(a * x, axis=-1) - k


def _check_unit(x, d):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != d:
        raise ValueError(f"dimension mismatch: expected {d}, got {x.shape[-1]}")
    if np.any(np.abs(np.linalg.norm(x, axis=-1) - 1.0) > UNIT_TOL):
        raise ValueError("input vectors must have unit norm")
    return x


def vmf_logpdf(x, params: VmfParams):
    """Log density of unit vector(s) x w.r.t. the surface measure on S^{d-1}, d >= 2."""
    if params.dim < 2:
        raise ValueError("use vmf_logpmf_s0 for d = 1")
    x = _check_unit(x, params.dim)
    return log_normalizer(params.dim, params.kappa) + params.kappa * (x @ params.mu - 1.0)


def vmf_logpmf_s0(x, params: VmfParams):
    """log P(x) = kappa*mu*x - log(2 cosh kappa) on S^0 = {-1, +1}."""
    if params.dim != 1:
        raise ValueError("vmf_logpmf_s0 needs a one-dimensional VMF")
    x = np.asarray(x, dtype=float)
    if not np.all(np.isin(x, (-1.0, 1.0))):
        raise ValueError("points of S^0 are -1 and +1")
    k = params.kappa
    return k * params.mu[0] * x - (k + np.logaddexp(0.0, -2.0 * k))


def mean_resultant(d, kappa):
    """Norm of the VMF expectation: tanh(k) for d = 1, I_{d/2}(k)/I_{d/2-1}(k) otherwise."""
    if d == 1:
        return np.tanh(kappa)
    return bessel_ratio(d / 2 - 1, kappa)


def vmf_mean(params: VmfParams):
    return mean_resultant(params.dim, params.kappa) * params.mu


def mean_natural(a):
    """
    VMF expectations for rows of natural parameters a. Zero rows map to zero
    (uniform distribution).
    """
    a = np.asarray(a, dtype=float)
    k = np.linalg.norm(a, axis=-1, keepdims=True)
    rho = mean_resultant(a.shape[-1], k)
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(k > 0, rho * a / k, 0.0)
    return out


def solve_kappa(d, rho, tol=1e-10):
    """
    Concentration with mean resultant length rho, i.e. A_nu(k) = rho.

    Newton on A(k) - rho from the Banerjee et al. starting point, with a
    bisection fallback whenever a step leaves the current bracket.
    """
    rho = float(rho)
    if rho <= 0:
        return 0.0
    if rho >= 1.0:
        return KAPPA_MAX
    if d == 1:
        return min(float(np.arctanh(rho)), KAPPA_MAX)
    nu = d / 2 - 1
    lo, hi = 0.0, KAPPA_MAX
    k = rho * (d - rho**2) / (1 - rho**2)
    k = min(max(k, 1e-12), KAPPA_MAX)
    for _ in range(200):
        a = float(bessel_ratio(nu, k))
        err = a - rho
        if abs(err) <= tol:
            return k
        if err > 0:
            hi = k
        else:
            lo = k
        # A'(k) = 1 - A^2 - (2nu+1) A / k
        slope = 1.0 - a * a - (2 * nu + 1) * a / k
        step = k - err / slope if slope > 0 else np.nan
        k = step if lo < step < hi else 0.5 * (lo + hi)
        if hi - lo <= 1e-15 * hi:
            break
    return k


def vmf_fit_ml(vectors, weights=None):
    """
    Maximum-likelihood VMF for a weighted collection of unit vectors (rows).

    Rows need not be exactly unit norm: only the weighted mean enters the
    likelihood, so the fit is the maximizer of sum_j w_j log V(x_j | mu, k)
    for any rows x_j.
    """
    x = np.atleast_2d(np.asarray(vectors, dtype=float))
    if x.shape[0] == 0:
        raise ValueError("cannot fit a VMF to an empty collection")
    if weights is None:
        weights = np.ones(x.shape[0])
    weights = np.asarray(weights, dtype=float)
    if np.any(weights < 0) or weights.sum() <= 0:
        raise ValueError("weights must be non-negative and not all zero")
    rbar = weights @ x / weights.sum()
    return fit_from_resultant(rbar)


def fit_from_resultant(rbar):
    """VMF ML fit given the (weighted) mean vector of the data."""
    rbar = np.asarray(rbar, dtype=float).ravel()
    d = rbar.size
    rho = float(np.linalg.norm(rbar))
    if rho <= 1e-12:
        return VmfParams(canonical(d), 0.0, arbitrary_mu=True)
    mu = rbar / rho
    if rho >= 1 - 1e-12:
        return VmfParams(mu, KAPPA_MAX, capped=True)
    return VmfParams(mu, solve_kappa(d, rho))


def _as_rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def sample_cosines(d, kappa, count, rng):
    """
    Wood (1994) rejection sampler for w = mu'x under a VMF on S^{d-1}, d >= 2.
    kappa may be a scalar or an array of length count.
    """
    kappa = np.broadcast_to(np.asarray(kappa, dtype=float), (count,))
    m = d - 1
    # b = (-2k + sqrt(4k^2 + m^2)) / m, in a form that does not cancel
    b = m / (2 * kappa + np.sqrt(4 * kappa**2 + m**2))
    x0 = (1 - b) / (1 + b)
    c = kappa * x0 + m * np.log(1 - x0**2)
    w = np.empty(count)
    todo = np.arange(count)
    while todo.size:
        bt, x0t, ct, kt = b[todo], x0[todo], c[todo], kappa[todo]
        z = rng.beta(m / 2, m / 2, size=todo.size)
        wt = (1 - (1 + bt) * z) / (1 - (1 - bt) * z)
        u = rng.uniform(size=todo.size)
        ok = kt * wt + m * np.log(1 - x0t * wt) - ct >= np.log(u)
        w[todo[ok]] = wt[ok]
        todo = todo[~ok]
    return w


def _householder_to(mu, x):
    """Reflect rows of x so that e_1 maps to mu (rows of mu if 2-d)."""
    e = np.zeros_like(mu)
    e[..., 0] = 1.0
    u = e - mu
    nu2 = np.sum(u * u, axis=-1, keepdims=True)
    safe = nu2 > 1e-30
    coef = np.where(safe, 2 * np.sum(x * u, axis=-1, keepdims=True) / np.where(safe, nu2, 1.0), 0.0)
    return x - coef * u


def sample_natural(a, rng):
    """
    One VMF draw per row of natural parameters a (shape (N, d)); vectorized
    over rows with different directions and concentrations.
    """
    a = np.atleast_2d(np.asarray(a, dtype=float))
    n, d = a.shape
    k = np.linalg.norm(a, axis=1)
    if d == 1:
        p_plus = 1.0 / (1.0 + np.exp(-2.0 * a[:, 0]))
        return np.where(rng.uniform(size=n) < p_plus, 1.0, -1.0)[:, None]
    w = sample_cosines(d, k, n, rng)
    v = rng.normal(size=(n, d - 1))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    x = np.hstack([w[:, None], np.sqrt(np.clip(1 - w**2, 0, None))[:, None] * v])
    mu = np.where(k[:, None] > 0, a / np.where(k > 0, k, 1.0)[:, None], canonical(d))
    return _householder_to(mu, x)


def vmf_sample(params: VmfParams, count, seed=None):
    """
    ``count`` i.i.d. draws as rows of a (count, d) array. ``seed`` is an int or a
    numpy Generator; the same seed reproduces the same draws.
    """
    if count < 0:
        raise ValueError("count must be >= 0")
    rng = _as_rng(seed)
    a = np.broadcast_to(params.natural, (count, params.dim))
    if count == 0:
        return np.zeros((0, params.dim))
    return sample_natural(a, rng)
