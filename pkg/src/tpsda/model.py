"""
The T-PSDA model: architecture, parameters, hidden-variable posteriors and the
closed-form marginal likelihood.

Per speaker there are m speaker factors z_i on S^{d_i - 1}, and per observation
n - m channel factors y_ti. An observation is VMF(x | mu_t, kappa) with

    mu_t = sum_{i<=m} w_i K_i z_i + sum_{i>m} w_i K_i y_ti,

where ||w|| = 1 and F = [K_1 ... K_n] has orthonormal columns, so mu_t is
always unit norm. Each factor has a conjugate VMF prior V(v_i, gamma_i).
"""

import io
import struct
from dataclasses import dataclass, field

import numpy as np

from .vmf import canonical, log_normalizer, logpdf_natural

ORTHO_TOL = 1e-6
MAGIC = b"TPSDA01\n"


@dataclass(frozen=True)
class ModelStructure:
    D: int
    dims: tuple
    m: int

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))

    @property
    def n(self):
        return len(self.dims)

    @property
    def Ds(self):
        return sum(self.dims)

    @property
    def offsets(self):
        return np.concatenate([[0], np.cumsum(self.dims)]).astype(int)

    def block(self, i):
        o = self.offsets
        return slice(o[i], o[i + 1])


def validate(structure: ModelStructure, D=None):
    """List of violated constraints; empty when the architecture is usable."""
    errors = []
    D = structure.D if D is None else D
    if D != structure.D:
        errors.append(f"structure is for D={structure.D}, data has D={D}")
    if D < 1:
        errors.append(f"D={D} must be >= 1")
    if structure.n < 1:
        errors.append("need at least one factor")
    for i, d in enumerate(structure.dims):
        if d < 1:
            errors.append(f"d_{i + 1}={d} must be >= 1")
    if not 1 <= structure.m <= structure.n:
        errors.append(f"m={structure.m} must satisfy 1 <= m <= n={structure.n}")
    if structure.Ds > D:
        errors.append(f"D_s={structure.Ds} > D={D}")
    return errors


def _frozen(a):
    a = np.array(a, dtype=float)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class TPsdaModel:
    """
    Trained parameters. Immutable; use ``replace`` to derive updated models.

    Weights are canonicalized to w_i >= 0 by flipping the sign of K_i, which
    leaves the generative model unchanged.
    """

    structure: ModelStructure
    kappa: float
    w: np.ndarray
    F: np.ndarray
    v: tuple
    gamma: np.ndarray
    blocks: tuple = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        s = self.structure
        errs = validate(s)
        if errs:
            raise ValueError("; ".join(errs))
        if not self.kappa > 0:
            raise ValueError(f"kappa must be > 0, got {self.kappa}")
        w = np.array(self.w, dtype=float).ravel()
        F = np.array(self.F, dtype=float)
        if w.shape != (s.n,):
            raise ValueError(f"w must have {s.n} entries")
        if F.shape != (s.D, s.Ds):
            raise ValueError(f"F must be {s.D}x{s.Ds}, got {F.shape}")
        if abs(np.linalg.norm(w) - 1.0) > ORTHO_TOL:
            raise ValueError(f"||w|| = {np.linalg.norm(w)}, must be 1")
        drift = np.max(np.abs(F.T @ F - np.eye(s.Ds)))
        if drift > ORTHO_TOL:
            raise ValueError(f"F'F deviates from identity by {drift}")
        for i in range(s.n):
            if w[i] < 0:
                w[i] = -w[i]
                F[:, s.block(i)] *= -1
        v = tuple(_frozen(vi).ravel() for vi in self.v)
        if len(v) != s.n or any(vi.size != d for vi, d in zip(v, s.dims)):
            raise ValueError("need one prior direction per factor with matching dimension")
        for vi in v:
            if abs(np.linalg.norm(vi) - 1.0) > ORTHO_TOL:
                raise ValueError("prior directions must be unit norm")
        gamma = np.array(self.gamma, dtype=float).ravel()
        if gamma.shape != (s.n,) or np.any(gamma < 0):
            raise ValueError("need one non-negative gamma per factor")
        object.__setattr__(self, "kappa", float(self.kappa))
        object.__setattr__(self, "w", _frozen(w))
        object.__setattr__(self, "F", _frozen(F))
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "gamma", _frozen(gamma))
        object.__setattr__(self, "blocks", tuple(self.F[:, s.block(i)] for i in range(s.n)))

    @property
    def n(self):
        return self.structure.n

    @property
    def m(self):
        return self.structure.m

    @property
    def D(self):
        return self.structure.D

    def K(self, i):
        return self.blocks[i]

    def prior_natural(self, i):
        return self.gamma[i] * self.v[i]

    def replace(self, **changes):
        kw = dict(structure=self.structure, kappa=self.kappa, w=self.w, F=self.F,
                  v=self.v, gamma=self.gamma)
        kw.update(changes)
        return TPsdaModel(**kw)

    def save(self, path):
        with open(path, "wb") as f:
            f.write(dumps(self))

    @classmethod
    def load(cls, path):
        with open(path, "rb") as f:
            return loads(f.read())


def make_model(structure, kappa, w=None, F=None, v=None, gamma=None):
    """Convenience constructor with defaults w = 1/sqrt(n), F = leading identity columns, gamma = 0."""
    n = structure.n
    if w is None:
        w = np.full(n, 1 / np.sqrt(n))
    if F is None:
        F = np.eye(structure.D)[:, : structure.Ds]
    if v is None:
        v = [canonical(d) for d in structure.dims]
    if gamma is None:
        gamma = np.zeros(n)
    return TPsdaModel(structure, kappa, w, F, tuple(v), gamma)


def random_model(structure, kappa, seed=None, gamma=None, v=None, w=None):
    """A valid model with random orthonormal loadings and random weights."""
    rng = np.random.default_rng(seed)
    F, _ = np.linalg.qr(rng.normal(size=(structure.D, structure.Ds)))
    if w is None:
        w = np.abs(rng.normal(size=structure.n)) + 0.1
        w /= np.linalg.norm(w)
    if v is None:
        v = []
        for d in structure.dims:
            vi = rng.normal(size=d)
            v.append(vi / np.linalg.norm(vi))
    return make_model(structure, kappa, w=w, F=F, v=v, gamma=gamma)


def degenerate_psda(model):
    """True when the model is the original single-factor PSDA (n = m = 1, d_1 = D)."""
    s = model.structure
    return s.n == 1 and s.m == 1 and s.dims[0] == s.D


def make_cosine_equivalent(D, kappa=1.0):
    """Degenerate PSDA with a uniform speaker prior; its scores rank trials like cosine similarity."""
    return make_model(ModelStructure(D, (D,), 1), kappa)


def _unit(x, name):
    x = np.asarray(x, dtype=float).ravel()
    assert abs(np.linalg.norm(x) - 1.0) <= 1e-9, f"{name} is not unit norm"
    return x


def mean_direction(model, z, y=()):
    """mu = sum_i w_i K_i h_i over speaker factors z and channel factors y."""
    s = model.structure
    if len(z) != s.m or len(y) != s.n - s.m:
        raise ValueError(f"need {s.m} speaker and {s.n - s.m} channel factors")
    mu = np.zeros(s.D)
    for i, h in enumerate(list(z) + list(y)):
        h = _unit(h, f"factor {i + 1}")
        if h.size != s.dims[i]:
            raise ValueError(f"factor {i + 1} has dimension {h.size}, expected {s.dims[i]}")
        mu += model.w[i] * (model.K(i) @ h)
    assert abs(np.linalg.norm(mu) - 1.0) <= 1e-9, "mean direction is not unit norm"
    return mu


@dataclass
class FactorPosterior:
    """Natural parameters of the factorial posterior: one row per speaker (z) or per observation (y)."""

    speaker: list
    channel: list


def _rows(X):
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[0] == 0:
        raise ValueError("need at least one observation")
    return X


def posterior_speaker(model, X):
    """Posterior natural parameters gamma_i v_i + kappa w_i K_i' sum_t x_t for i <= m."""
    xsum = _rows(X).sum(axis=0)
    return [model.prior_natural(i) + model.kappa * model.w[i] * (model.K(i).T @ xsum)
            for i in range(model.m)]


def posterior_channel(model, x):
    """Posterior natural parameters gamma_i v_i + kappa w_i K_i' x_t for i > m; rows per observation."""
    x = np.asarray(x, dtype=float)
    X = np.atleast_2d(x)
    out = [model.prior_natural(i) + model.kappa * model.w[i] * (X @ model.K(i))
           for i in range(model.m, model.n)]
    return [o[0] for o in out] if x.ndim == 1 else out


def speaker_index(labels):
    """Map arbitrary speaker labels to 0..S-1 in order of first appearance."""
    labels = np.asarray(labels)
    _, first, inv = np.unique(labels, return_index=True, return_inverse=True)
    order = np.argsort(np.argsort(first))
    return order[inv.ravel()], len(first)


def group_sums(X, spk, S):
    out = np.zeros((S, X.shape[1]))
    np.add.at(out, spk, X)
    return out


def posteriors(model, X, spk, S):
    """All posterior natural parameters for a labelled dataset (spk holds 0..S-1 indices)."""
    sums = group_sums(X, spk, S)
    speaker = [model.prior_natural(i) + model.kappa * model.w[i] * (sums @ model.K(i))
               for i in range(model.m)]
    channel = [model.prior_natural(i) + model.kappa * model.w[i] * (X @ model.K(i))
               for i in range(model.m, model.n)]
    return FactorPosterior(speaker, channel)


def _anchor(model, i, anchors):
    if anchors is not None:
        return np.asarray(anchors[i], dtype=float)
    return model.v[i] if model.gamma[i] > 0 else canonical(model.structure.dims[i])


def log_marginal(model, X, labels, anchors=None):
    """
    sum_s log P(X_s), with all hidden variables integrated out by the
    candidate's trick: for any fixed hidden values h0,

        P(X) = P(X | h0) P(h0) / P(h0 | X).

    ``anchors`` optionally gives the n unit vectors used as h0 (the same value
    for every speaker and observation); the result does not depend on them.
    """
    X = _rows(X)
    spk, S = speaker_index(labels)
    post = posteriors(model, X, spk, S)
    s = model.structure
    h0 = [_anchor(model, i, anchors) for i in range(s.n)]
    mu0 = sum(model.w[i] * (model.K(i) @ h0[i]) for i in range(s.n))
    total = np.sum(log_normalizer(s.D, model.kappa) + model.kappa * (X @ mu0 - 1.0))
    for i in range(s.n):
        prior = logpdf_natural(h0[i], model.prior_natural(i))
        a = post.speaker[i] if i < s.m else post.channel[i - s.m]
        total += a.shape[0] * prior - np.sum(logpdf_natural(h0[i], a))
    return float(total)


# --- serialization -----------------------------------------------------------
#
# Layout: the magic line "TPSDA01", then "key=value" text lines up to a line
# "end", then little-endian float64 data: w (n values), F column-major (which is
# each K_i column-major in turn), then for each factor v_i followed by gamma_i.
# kappa is written with repr(), which round-trips exactly.


def dumps(model):
    s = model.structure
    header = [
        f"D={s.D}",
        f"n={s.n}",
        f"m={s.m}",
        "dims=" + ",".join(str(d) for d in s.dims),
        f"kappa={model.kappa!r}",
        "flags=" + ("learned_priors" if np.any(model.gamma > 0) else "none"),
        "end",
    ]
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(("\n".join(header) + "\n").encode("ascii"))
    buf.write(np.asarray(model.w, dtype="<f8").tobytes())
    buf.write(np.asarray(model.F, dtype="<f8").tobytes(order="F"))
    for vi, gi in zip(model.v, model.gamma):
        buf.write(np.asarray(vi, dtype="<f8").tobytes())
        buf.write(struct.pack("<d", gi))
    return buf.getvalue()


def loads(data):
    if not data.startswith(MAGIC):
        raise ValueError("not a TPSDA01 model file")
    pos = len(MAGIC)
    meta = {}
    while True:
        nl = data.find(b"\n", pos)
        if nl < 0:
            raise ValueError("truncated model header")
        line = data[pos:nl].decode("ascii")
        pos = nl + 1
        if line == "end":
            break
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"malformed header line {line!r}")
        meta[key] = value
    try:
        dims = tuple(int(d) for d in meta["dims"].split(","))
        structure = ModelStructure(int(meta["D"]), dims, int(meta["m"]))
        kappa = float(meta["kappa"])
    except (KeyError, ValueError) as e:
        raise ValueError(f"bad model header: {e}") from None
    if int(meta["n"]) != structure.n:
        raise ValueError("header n does not match dims")
    need = 8 * (structure.n + structure.D * structure.Ds + structure.Ds + structure.n)
    if len(data) - pos != need:
        raise ValueError(f"model body has {len(data) - pos} bytes, expected {need}")

    def take(count):
        nonlocal pos
        out = np.frombuffer(data, dtype="<f8", count=count, offset=pos).astype(float)
        pos += 8 * count
        return out

    w = take(structure.n)
    F = take(structure.D * structure.Ds).reshape((structure.D, structure.Ds), order="F")
    v, gamma = [], []
    for d in structure.dims:
        v.append(take(d))
        gamma.append(take(1)[0])
    return TPsdaModel(structure, kappa, w, F, tuple(v), np.array(gamma))
