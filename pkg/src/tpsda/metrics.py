"""Detection metrics (EER, minimum detection cost) and adaptive S-norm."""

import warnings
from dataclasses import dataclass

import numpy as np

STD_FLOOR = 1e-12


@dataclass(frozen=True)
class DetectionCostParams:
    p_target: float = 0.05
    c_miss: float = 1.0
    c_fa: float = 1.0

    def __post_init__(self):
        if not 0 < self.p_target < 1:
            raise ValueError("p_target must be in (0, 1)")
        if self.c_miss <= 0 or self.c_fa <= 0:
            raise ValueError("costs must be positive")


def _split(scores, labels):
    scores = np.asarray(scores, dtype=float).ravel()
    if labels is None:
        raise ValueError("trial labels are required")
    labels = np.asarray(labels).ravel().astype(bool)
    if labels.shape != scores.shape:
        raise ValueError("need one label per score")
    if labels.all() or not labels.any():
        raise ValueError("need at least one target and one nontarget trial")
    return scores, labels


def roc_points(scores, labels):
    """
    Miss and false-alarm rates at every distinct threshold, accepting scores
    >= threshold. Equal scores form a single step. The sweep runs from
    threshold -inf (P_miss 0, P_fa 1) to +inf (P_miss 1, P_fa 0).
    """
    scores, labels = _split(scores, labels)
    order = np.argsort(scores, kind="mergesort")
    s, lab = scores[order], labels[order]
    ntar, nnon = lab.sum(), (~lab).sum()
    # boundaries between groups of equal scores
    cuts = np.flatnonzero(np.diff(s)) + 1
    cuts = np.concatenate([[0], cuts, [s.size]])
    tar_below = np.concatenate([[0], np.cumsum(lab)])[cuts]
    non_below = np.concatenate([[0], np.cumsum(~lab)])[cuts]
    pmiss = tar_below / ntar
    pfa = (nnon - non_below) / nnon
    return pmiss, pfa


def eer(scores, labels):
    """
    Equal error rate: linear interpolation between the two ROC points where
    P_miss - P_fa changes sign.
    """
    pmiss, pfa = roc_points(scores, labels)
    diff = pmiss - pfa
    k = int(np.flatnonzero(diff >= 0)[0])
    if diff[k] == 0 or k == 0:
        return float(pmiss[k])
    # crossing between points k-1 (diff < 0) and k (diff > 0)
    a = diff[k - 1] / (diff[k - 1] - diff[k])
    return float(pmiss[k - 1] + a * (pmiss[k] - pmiss[k - 1]))


def min_dcf(scores, labels, params=None, normalize=True):
    """Minimum over thresholds of p c_miss P_miss + (1-p) c_fa P_fa, divided by the cost of the best trivial system."""
    params = params or DetectionCostParams()
    pmiss, pfa = roc_points(scores, labels)
    p = params.p_target
    cost = p * params.c_miss * pmiss + (1 - p) * params.c_fa * pfa
    best = float(np.min(cost))
    if normalize:
        best /= min(p * params.c_miss, (1 - p) * params.c_fa)
    return best


def cost_at_eer_threshold(scores, labels, params=None):
    """Normalized detection cost at the ROC point nearest the EER crossing."""
    params = params or DetectionCostParams()
    pmiss, pfa = roc_points(scores, labels)
    k = int(np.argmin(np.abs(pmiss - pfa)))
    p = params.p_target
    cost = p * params.c_miss * pmiss[k] + (1 - p) * params.c_fa * pfa[k]
    return float(cost / min(p * params.c_miss, (1 - p) * params.c_fa))


@dataclass
class CohortStats:
    mean: np.ndarray
    std: np.ndarray
    top_k: int
    cohort_size: int
    floored: np.ndarray


def cohort_stats(side_vs_cohort, top_k):
    """
    Mean and standard deviation of each row's top_k cohort scores. The top-k
    set is chosen by descending score with ascending cohort index breaking ties.
    """
    S = np.atleast_2d(np.asarray(side_vs_cohort, dtype=float))
    C = S.shape[1]
    if not 1 <= top_k <= C:
        raise ValueError(f"top_k={top_k} must be between 1 and the cohort size {C}")
    # stable sort on negated scores keeps the lower index first among ties
    idx = np.argsort(-S, axis=1, kind="stable")[:, :top_k]
    top = np.take_along_axis(S, idx, axis=1)
    mean = top.mean(axis=1)
    std = top.std(axis=1)
    floored = std < STD_FLOOR
    if floored.any():
        warnings.warn(f"{int(floored.sum())} cohort score sets have zero variance; std floored",
                      RuntimeWarning, stacklevel=2)
        std = np.maximum(std, STD_FLOOR)
    return CohortStats(mean, std, top_k, C, floored)


def adaptive_snorm(raw, enroll_vs_cohort, test_vs_cohort, top_k=400):
    """
    Symmetric adaptive score normalization

        s' = ((s - mu_e)/sigma_e + (s - mu_t)/sigma_t) / 2,

    with mu, sigma taken over each side's top_k cohort scores.
    """
    raw = np.atleast_2d(np.asarray(raw, dtype=float))
    e = cohort_stats(enroll_vs_cohort, top_k)
    t = cohort_stats(test_vs_cohort, top_k)
    if e.mean.size != raw.shape[0] or t.mean.size != raw.shape[1]:
        raise ValueError("cohort score matrices do not match the trial matrix")
    ze = (raw - e.mean[:, None]) / e.std[:, None]
    zt = (raw - t.mean[None, :]) / t.std[None, :]
    return 0.5 * (ze + zt)


def select_cohort(n, size, seed=0):
    """Indices of ``size`` rows drawn uniformly without replacement, sorted."""
    if size > n:
        raise ValueError(f"cohort size {size} exceeds the {n} available embeddings")
    rng = np.random.default_rng(seed)
    return np.sort(rng.choice(n, size=size, replace=False))


def report(scores, labels, params=None):
    params = params or DetectionCostParams()
    scores, labels = _split(scores, labels)
    return {
        "eer": eer(scores, labels),
        "min_dcf": min_dcf(scores, labels, params),
        "p_target": params.p_target,
        "n_target": int(labels.sum()),
        "n_nontarget": int((~labels).sum()),
    }


def format_report(rep):
    return " ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in rep.items())
