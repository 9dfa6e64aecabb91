"""
Maximum-likelihood EM training of T-PSDA.

E-step: posterior expectations of every hidden factor (VMF means of the
factorial posterior). M-step: VMF ML fits of the priors, a few rounds of
coordinate ascent on the weights w and loadings F of

    sum_i w_i trace(K_i' R_i),   subject to w'w = 1, F'F = I,

and finally a scalar search for kappa.
"""

import logging
import math
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .model import TPsdaModel, group_sums, log_marginal, speaker_index, validate
from .specfun import log_cbar
from .vmf import canonical, fit_from_resultant, mean_natural, solve_kappa

log = logging.getLogger(__name__)

E_STEP_CHUNK = 4096  # speakers per accumulation chunk; fixed so results never depend on threads


@dataclass
class EmConfig:
    iterations: int = 200
    wf_inner_iterations: int = 5
    kappa_bracket: tuple = (1e-2, 1e6)
    seed: int = 0
    learn_priors: bool = False
    convergence_tol: float = 1e-7
    threads: int = 1

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        lo, hi = self.kappa_bracket
        if not 0 < lo < hi:
            raise ValueError("kappa bracket must satisfy 0 < lo < hi")


@dataclass
class SufficientStats:
    """
    R[i] is D x d_i: sum_s (sum_t x_st) zbar_si' for speaker factors and
    sum_st x_st ybar_sti' for channel factors. resultant[i] and count[i] are
    the sum and number of posterior means of factor i.
    """

    R: list
    resultant: list
    count: list
    T: int
    S: int
    D: int

    def __add__(self, other):
        return SufficientStats(
            [a + b for a, b in zip(self.R, other.R)],
            [a + b for a, b in zip(self.resultant, other.resultant)],
            [a + b for a, b in zip(self.count, other.count)],
            self.T + other.T, self.S + other.S, self.D,
        )

    def objective(self, w, F, dims):
        """sum_i w_i trace(K_i' R_i)."""
        return float(w @ block_traces(self, F, dims))


def block_traces(stats, F, dims):
    off = np.concatenate([[0], np.cumsum(dims)]).astype(int)
    return np.array([np.sum(F[:, off[i]:off[i + 1]] * stats.R[i]) for i in range(len(dims))])


def _estep_chunk(model, X, spk, S):
    s = model.structure
    sums = group_sums(X, spk, S)
    R, res, cnt = [], [], []
    for i in range(s.n):
        if i < s.m:
            a = model.prior_natural(i) + model.kappa * model.w[i] * (sums @ model.K(i))
            mean = mean_natural(a)
            R.append(sums.T @ mean)
        else:
            a = model.prior_natural(i) + model.kappa * model.w[i] * (X @ model.K(i))
            mean = mean_natural(a)
            R.append(X.T @ mean)
        res.append(mean.sum(axis=0))
        cnt.append(mean.shape[0])
    return SufficientStats(R, res, cnt, X.shape[0], S, s.D)


def e_step(model, X, labels, threads=1):
    """
    Posterior means of all hidden factors, accumulated into sufficient
    statistics. Speakers are processed in fixed chunks whose partial sums are
    added in chunk order, so any thread count gives identical results.
    """
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[0] == 0:
        raise ValueError("no training data")
    spk, S = speaker_index(labels)
    order = np.argsort(spk, kind="stable")
    X, spk = X[order], spk[order]
    bounds = np.searchsorted(spk, np.arange(0, S + E_STEP_CHUNK, E_STEP_CHUNK))
    bounds[-1] = len(spk)
    jobs = []
    for c in range(len(bounds) - 1):
        lo, hi = bounds[c], bounds[c + 1]
        if hi > lo:
            first = c * E_STEP_CHUNK
            jobs.append((lo, hi, first, int(spk[hi - 1]) - first + 1))

    def run(job):
        lo, hi, first, count = job
        return _estep_chunk(model, X[lo:hi], spk[lo:hi] - first, count)

    if threads > 1 and len(jobs) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            parts = list(pool.map(run, jobs))
    else:
        parts = [run(j) for j in jobs]
    total = parts[0]
    for p in parts[1:]:
        total = total + p
    return total


def m_step_priors(stats, dims):
    """VMF ML fit of each prior to the raw posterior means of its factor."""
    v, gamma = [], []
    for i, d in enumerate(dims):
        if stats.count[i] == 0:
            v.append(canonical(d))
            gamma.append(0.0)
            continue
        fit = fit_from_resultant(stats.resultant[i] / stats.count[i])
        v.append(fit.mu)
        gamma.append(fit.kappa)
    return v, np.array(gamma)


def polar_factor(M):
    """
    Closest matrix with orthonormal columns, M (M'M)^{-1/2}, through the
    symmetric eigendecomposition of M'M. Rank-deficient M'M is regularized by
    1e-12 * trace, with a warning.
    """
    G = M.T @ M
    lam, Q = np.linalg.eigh(G)
    tr = max(np.trace(G), np.finfo(float).tiny)
    if lam.min() < -1e-10 * tr:
        raise np.linalg.LinAlgError("M'M has a clearly negative eigenvalue")
    if lam.min() <= 1e-12 * tr:
        warnings.warn("rank-deficient loading update; regularizing", RuntimeWarning, stacklevel=2)
        lam = np.clip(lam, 0, None) + 1e-12 * tr
    P = M @ (Q / np.sqrt(lam)) @ Q.T
    if np.max(np.abs(P.T @ P - np.eye(P.shape[1]))) > 1e-10:
        # repair drift (regularized or ill-conditioned case) with the SVD polar factor
        U, _, Vt = np.linalg.svd(P, full_matrices=False)
        P = U @ Vt
    return P


def m_step_wf(stats, w, F, dims, inner_iterations=5):
    """
    Coordinate ascent on w and F: F <- polar([w_1 R_1 ... w_n R_n]) then
    w <- wt/|wt| with wt_i = trace(K_i' R_i). Each update maximizes the
    objective with the other block fixed, so the objective never decreases.
    """
    off = np.concatenate([[0], np.cumsum(dims)]).astype(int)
    w = np.array(w, dtype=float)
    F = np.array(F, dtype=float)
    for _ in range(inner_iterations):
        Ft = np.hstack([w[i] * stats.R[i] for i in range(len(dims))])
        F = polar_factor(Ft)
        wt = block_traces(stats, F, dims)
        norm = np.linalg.norm(wt)
        if norm == 0:
            break
        w = wt / norm
    for i in range(len(dims)):
        if w[i] < 0:
            w[i] = -w[i]
            F[:, off[i]:off[i + 1]] *= -1
    return w, F


def brent_minimize(f, lo, hi, xtol=1e-10, maxiter=500):
    """
    Brent's derivative-free minimizer (golden section with parabolic steps)
    on [lo, hi]. Stops when the bracket is within 2*xtol of its midpoint.
    """
    golden = 0.5 * (3.0 - math.sqrt(5.0))
    a, b = lo, hi
    x = w = v = a + golden * (b - a)
    fx = fw = fv = f(x)
    d = e = 0.0
    for _ in range(maxiter):
        mid = 0.5 * (a + b)
        tol1 = xtol + 1e-15 * abs(x)
        tol2 = 2.0 * tol1
        if abs(x - mid) <= tol2 - 0.5 * (b - a):
            break
        parabolic = False
        if abs(e) > tol1:
            r = (x - w) * (fx - fv)
            q = (x - v) * (fx - fw)
            p = (x - v) * q - (x - w) * r
            q = 2.0 * (q - r)
            if q > 0:
                p = -p
            q = abs(q)
            if abs(p) < abs(0.5 * q * e) and q * (a - x) < p < q * (b - x):
                e, d = d, p / q
                u = x + d
                if u - a < tol2 or b - u < tol2:
                    d = tol1 if mid >= x else -tol1
                parabolic = True
        if not parabolic:
            e = (a - x) if x >= mid else (b - x)
            d = golden * e
        u = x + (d if abs(d) >= tol1 else math.copysign(tol1, d))
        fu = f(u)
        if fu <= fx:
            if u >= x:
                a = x
            else:
                b = x
            v, w, x = w, x, u
            fv, fw, fx = fw, fx, fu
        else:
            if u < x:
                a = u
            else:
                b = u
            if fu <= fw or w == x:
                v, w = w, u
                fv, fw = fw, fu
            elif fu <= fv or v == x or v == w:
                v, fv = u, fu
    return x, fx


def kappa_objective(kappa, T, nu, linear):
    """T log(k^nu / I_nu(k)) + k * linear, the part of the auxiliary that depends on kappa."""
    return T * (float(log_cbar(nu, kappa)) - kappa) + kappa * linear


def m_step_kappa(stats, w, F, dims, bracket=(1e-2, 1e6)):
    """
    Observation concentration maximizing the auxiliary for fixed w and F,
    found by Brent search over log kappa (relative tolerance ~1e-10). If the
    optimum sits on the bracket edge the bracket is widened once by a factor
    1e3; if it is still on the edge the result is clamped with a warning.
    """
    nu = stats.D / 2 - 1
    linear = stats.objective(w, F, dims)
    lo, hi = bracket
    if linear <= 0:
        warnings.warn("non-positive alignment: kappa clamped to bracket minimum", RuntimeWarning, stacklevel=2)
        return float(lo)

    def neg(logk):
        return -kappa_objective(math.exp(logk), stats.T, nu, linear)

    for attempt in range(2):
        a, b = math.log(lo), math.log(hi)
        x, _ = brent_minimize(neg, a, b)
        at_lo, at_hi = x - a < 1e-6, b - x < 1e-6
        if not (at_lo or at_hi):
            return math.exp(x)
        if attempt == 0:
            lo, hi = (lo / 1e3, hi) if at_lo else (lo, hi * 1e3)
    warnings.warn("kappa optimum outside bracket; clamped", RuntimeWarning, stacklevel=2)
    return math.exp(x)


def init_model(structure, X, labels, seed=0):
    """
    Starting point for EM. Loadings: the leading D_s left singular vectors of
    the matrix of speaker means (padded with seeded random directions when
    there are fewer than D_s useful ones). w = 1/sqrt(n), gamma = 0, and kappa
    from the observation energy left outside span(F), or, when F spans
    everything, from the alignment of observations with their speaker means.
    """
    errs = validate(structure, np.shape(X)[1])
    if errs:
        raise ValueError("; ".join(errs))
    X = np.atleast_2d(np.asarray(X, dtype=float))
    spk, S = speaker_index(labels)
    sums = group_sums(X, spk, S)
    counts = np.bincount(spk, minlength=S)[:, None]
    means = sums / counts
    U, sv, _ = np.linalg.svd(means.T, full_matrices=False)
    keep = int(np.sum(sv > 1e-10 * max(sv.max(initial=0.0), 1e-300)))
    Ds = structure.Ds
    F = U[:, : min(keep, Ds)]
    if F.shape[1] < Ds:
        rng = np.random.default_rng(seed)
        extra = rng.normal(size=(structure.D, Ds - F.shape[1]))
        extra -= F @ (F.T @ extra)
        F = np.hstack([F, np.linalg.qr(extra)[0]])
    F = polar_factor(F)

    if structure.D > Ds:
        # noise is isotropic in the tangent space, so the energy outside the
        # model subspace estimates 1 - E[(mu'x)^2] per tangent dimension
        outside = X - (X @ F) @ F.T
        tangent = (structure.D - 1) * float(np.mean(np.sum(outside**2, axis=1))) / (structure.D - Ds)
        rho = math.sqrt(min(max(1.0 - tangent, 1e-12), 1.0))
    else:
        # no complement: alignment of each observation with its speaker's mean direction
        norms = np.linalg.norm(sums, axis=1, keepdims=True)
        dirs = np.divide(sums, norms, out=np.zeros_like(sums), where=norms > 0)
        rho = float(np.mean(np.sum(X * dirs[spk], axis=1)))
    kappa = solve_kappa(structure.D, min(max(rho, 1e-6), 1 - 1e-9))
    kappa = float(np.clip(kappa, 1e-2, 1e6))

    n = structure.n
    v = [canonical(d) for d in structure.dims]
    return TPsdaModel(structure, kappa, np.full(n, 1 / math.sqrt(n)), F, tuple(v), np.zeros(n))


def em_iteration(model, X, labels, config):
    """One E-step followed by the full M-step."""
    s = model.structure
    stats = e_step(model, X, labels, threads=config.threads)
    if config.learn_priors:
        v, gamma = m_step_priors(stats, s.dims)
    else:
        v, gamma = model.v, np.zeros(s.n)
    w, F = m_step_wf(stats, model.w, model.F, s.dims, config.wf_inner_iterations)
    kappa = m_step_kappa(stats, w, F, s.dims, config.kappa_bracket)
    return TPsdaModel(s, kappa, w, F, tuple(v), gamma)


@dataclass
class FitResult:
    model: TPsdaModel
    trace: list = field(default_factory=list)
    violations: list = field(default_factory=list)


def fit(X, labels, structure, config=None, init=None, log_file=None):
    """
    Train a model by EM. ``trace`` holds log_marginal of the initial model and
    after every iteration. Iterations where it dropped by more than 1e-6
    relative are listed in ``violations`` (it should stay empty).

    When ``log_file`` is given, one line per iteration is written to it:
    iter<TAB>log_marginal<TAB>kappa<TAB>wall_ms.
    """
    config = config or EmConfig()
    X = np.atleast_2d(np.asarray(X, dtype=float))
    labels = np.asarray(labels)
    if len(np.unique(labels)) < 2:
        raise ValueError("training needs at least two speakers")
    model = init if init is not None else init_model(structure, X, labels, config.seed)
    if not config.learn_priors and np.any(model.gamma > 0):
        model = model.replace(gamma=np.zeros(model.n))
    result = FitResult(model, [log_marginal(model, X, labels)])
    for it in range(1, config.iterations + 1):
        t0 = time.perf_counter()
        model = em_iteration(model, X, labels, config)
        llh = log_marginal(model, X, labels)
        prev = result.trace[-1]
        result.trace.append(llh)
        result.model = model
        ms = 1e3 * (time.perf_counter() - t0)
        if log_file is not None:
            log_file.write(f"{it}\t{llh!r}\t{model.kappa!r}\t{ms:.1f}\n")
        log.debug("iter %d: log_marginal=%.10g kappa=%.6g", it, llh, model.kappa)
        change = (llh - prev) / abs(prev)
        if change < -1e-6:
            result.violations.append(it)
            log.warning("log_marginal decreased at iteration %d (relative %.3g)", it, change)
        if abs(change) < config.convergence_tol:
            break
    return result
