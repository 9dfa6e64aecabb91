"""
Closed-form same-speaker vs different-speaker log-likelihood-ratio scoring.

For speaker factor i, with prior natural parameter n_i = gamma_i v_i and side
sums e, t, the posteriors given the enrollment side, the test side and both are

    l_i = n_i + kappa w_i K_i' e,   r_i = n_i + kappa w_i K_i' t,
    b_i = n_i + kappa w_i K_i' (e + t),

and the log LR is sum_i phi(|l_i|) + phi(|r_i|) - phi(|b_i|) - phi(|n_i|)
with phi(k) = log Cbar_nu(k) - k. Channel factors cancel.
"""

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .vmf import log_normalizer

SCORE_MAGIC = b"TPSC01\n"


@dataclass(frozen=True)
class SideSummary:
    """Sum of one trial side's embeddings, with the speaker-factor projections K_i' sum cached."""

    sum: np.ndarray
    count: int
    projected: tuple


def summarize_side(X, model):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[0] == 0:
        raise ValueError("a trial side needs at least one embedding")
    if X.shape[1] != model.D:
        raise ValueError(f"embedding dimension {X.shape[1]} does not match model D={model.D}")
    total = X.sum(axis=0)
    return SideSummary(total, X.shape[0], tuple(model.K(i).T @ total for i in range(model.m)))


def _phi(d, k):
    # log Cbar_nu(k) - k, less a (2 pi)^(d/2) term that cancels in the ratio
    return log_normalizer(d, k) - k


def _stack(sides, i):
    return np.array([s.projected[i] for s in sides])


def _llr_block(model, pe, pt):
    """
    Exact log LRs for all pairs of enrollment rows and test rows.
    pe[i] and pt[i] hold K_i' e and K_i' t stacked over sides.
    """
    out = np.zeros((pe[0].shape[0], pt[0].shape[0]))
    for i in range(model.m):
        d = model.structure.dims[i]
        prior = model.prior_natural(i)
        scale = model.kappa * model.w[i]
        left = prior + scale * pe[i]
        right = prior + scale * pt[i]
        both = prior + scale * (pe[i][:, None, :] + pt[i][None, :, :])
        kl = np.linalg.norm(left, axis=-1)
        kr = np.linalg.norm(right, axis=-1)
        kb = np.linalg.norm(both, axis=-1)
        out += (_phi(d, kl)[:, None] + _phi(d, kr)[None, :]
                - _phi(d, kb) - _phi(d, np.linalg.norm(prior)))
    return out


def llr(model, e: SideSummary, t: SideSummary):
    """Exact log-likelihood ratio of the same-speaker hypothesis for one trial."""
    if e.sum.shape != t.sum.shape or len(e.projected) != model.m:
        raise ValueError("side summaries do not match the model")
    pe = [p[None, :] for p in e.projected]
    pt = [p[None, :] for p in t.projected]
    return float(_llr_block(model, pe, pt)[0, 0])


def _approx_block(model, pe, pt):
    out = np.zeros((pe[0].shape[0], pt[0].shape[0]))
    for i in range(model.m):
        ne = np.linalg.norm(pe[i], axis=-1)
        nt = np.linalg.norm(pt[i], axis=-1)
        nb = np.linalg.norm(pe[i][:, None, :] + pt[i][None, :, :], axis=-1)
        out += abs(model.w[i]) * (nb - ne[:, None] - nt[None, :])
    return model.kappa * out


def llr_approx(model, e: SideSummary, t: SideSummary):
    """
    Fast uncalibrated score kappa sum_i |w_i| (|K_i'(e+t)| - |K_i'e| - |K_i't|).

    Tracks the exact score up to an additive offset when the speaker priors
    are uniform; the offset is dropped.
    """
    if e.sum.shape != t.sum.shape or len(e.projected) != model.m:
        raise ValueError("side summaries do not match the model")
    pe = [p[None, :] for p in e.projected]
    pt = [p[None, :] for p in t.projected]
    return float(_approx_block(model, pe, pt)[0, 0])


@dataclass
class TrialScores:
    """
    Score matrix (enroll x test). ``mask`` marks the trials of interest and
    ``key`` holds 1 for target, 0 for nontarget (only read where mask is set).
    """

    scores: np.ndarray
    enroll_ids: list = None
    test_ids: list = None
    mask: np.ndarray = None
    key: np.ndarray = None

    def __post_init__(self):
        self.scores = np.atleast_2d(np.asarray(self.scores, dtype=float))
        ne, nt = self.scores.shape
        if self.enroll_ids is None:
            self.enroll_ids = [f"e{i}" for i in range(ne)]
        if self.test_ids is None:
            self.test_ids = [f"t{j}" for j in range(nt)]
        if len(self.enroll_ids) != ne or len(self.test_ids) != nt:
            raise ValueError("id lists do not match the score matrix")
        if self.mask is None:
            self.mask = np.ones((ne, nt), dtype=bool)

    def labelled(self):
        """(scores, labels) vectors over the masked trials that carry a key."""
        if self.key is None:
            raise ValueError("trial scores have no key")
        sel = self.mask
        return self.scores[sel], np.asarray(self.key)[sel].astype(bool)

    def write_text(self, path_or_file):
        """One line per masked trial: enroll_id<TAB>test_id<TAB>score (9 significant digits)."""
        lines = []
        for i, j in zip(*np.nonzero(self.mask)):
            lines.append(f"{self.enroll_ids[i]}\t{self.test_ids[j]}\t{self.scores[i, j]:.9g}\n")
        text = "".join(lines)
        if hasattr(path_or_file, "write"):
            path_or_file.write(text)
        else:
            with open(path_or_file, "w") as f:
                f.write(text)

    @classmethod
    def read_text(cls, path):
        rows = []
        with open(path) as f:
            for ln, line in enumerate(f, 1):
                if not line.strip():
                    continue
                parts = line.rstrip("\n").split("\t")
                if len(parts) != 3:
                    raise ValueError(f"{path}:{ln}: expected enroll<TAB>test<TAB>score")
                rows.append((parts[0], parts[1], float(parts[2])))
        enroll = list(dict.fromkeys(r[0] for r in rows))
        test = list(dict.fromkeys(r[1] for r in rows))
        ei = {k: i for i, k in enumerate(enroll)}
        ti = {k: j for j, k in enumerate(test)}
        scores = np.zeros((len(enroll), len(test)))
        mask = np.zeros_like(scores, dtype=bool)
        for e, t, s in rows:
            scores[ei[e], ti[t]] = s
            mask[ei[e], ti[t]] = True
        return cls(scores, enroll, test, mask)

    def write_binary(self, path):
        """Magic "TPSC01", rows and columns as little-endian uint64, then row-major float64 scores."""
        ne, nt = self.scores.shape
        with open(path, "wb") as f:
            f.write(SCORE_MAGIC)
            f.write(struct.pack("<QQ", ne, nt))
            f.write(np.ascontiguousarray(self.scores, dtype="<f8").tobytes())

    @classmethod
    def read_binary(cls, path):
        with open(path, "rb") as f:
            data = f.read()
        if not data.startswith(SCORE_MAGIC) or len(data) < len(SCORE_MAGIC) + 16:
            raise ValueError("not a TPSC01 score file")
        ne, nt = struct.unpack_from("<QQ", data, len(SCORE_MAGIC))
        body = data[len(SCORE_MAGIC) + 16:]
        if len(body) != 8 * ne * nt:
            raise ValueError("score matrix body has the wrong size")
        return cls(np.frombuffer(body, dtype="<f8").reshape(ne, nt).astype(float))


def score_matrix(model, enroll_sides, test_sides, exact=True, threads=1, block=None):
    """
    Score every enrollment side against every test side. Rows are evaluated in
    fixed-size blocks, optionally on several threads; the result does not
    depend on the thread count.
    """
    if not enroll_sides or not test_sides:
        return TrialScores(np.zeros((len(enroll_sides), len(test_sides))))
    pe = [_stack(enroll_sides, i) for i in range(model.m)]
    pt = [_stack(test_sides, i) for i in range(model.m)]
    kernel = _llr_block if exact else _approx_block
    ne, nt = len(enroll_sides), len(test_sides)
    if block is None:
        width = max(1, nt * max(model.structure.dims[: model.m]))
        block = max(1, min(ne, 2**22 // width))
    starts = list(range(0, ne, block))
    out = np.empty((ne, nt))

    def run(lo):
        sl = slice(lo, lo + block)
        out[sl] = kernel(model, [p[sl] for p in pe], pt)

    if threads and threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(run, starts))
    else:
        for lo in starts:
            run(lo)
    return TrialScores(out)


def score_embeddings(model, E, T, exact=True, threads=1):
    """Single-embedding sides on both sides: rows of E against rows of T."""
    es = [summarize_side(x, model) for x in np.atleast_2d(E)]
    ts = [summarize_side(x, model) for x in np.atleast_2d(T)]
    return score_matrix(model, es, ts, exact=exact, threads=threads).scores

