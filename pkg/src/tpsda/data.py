"""Embedding sets, their file formats, preprocessing and synthetic data."""

import struct
from dataclasses import dataclass

import numpy as np
from scipy.linalg import eigh

from .vmf import sample_natural

EMB_MAGIC = b"TPEMB01\n"
PREP_MAGIC = b"TPPREP01\n"


@dataclass(frozen=True)
class EmbeddingSet:
    """N x D embedding matrix with unique ids and optional speaker labels."""

    X: np.ndarray
    ids: tuple
    labels: tuple = None

    def __post_init__(self):
        X = np.array(self.X, dtype=float)
        if X.ndim == 1 and X.size == 0:
            X = X.reshape(0, 0)
        if X.ndim != 2:
            raise ValueError("embeddings must form a 2-d matrix")
        ids = tuple(str(i) for i in self.ids)
        if len(ids) != X.shape[0]:
            raise ValueError(f"{len(ids)} ids for {X.shape[0]} embeddings")
        if len(set(ids)) != len(ids):
            seen = set()
            dup = next(i for i in ids if i in seen or seen.add(i))
            raise ValueError(f"duplicate embedding id {dup!r}")
        labels = None if self.labels is None else tuple(str(s) for s in self.labels)
        if labels is not None and len(labels) != len(ids):
            raise ValueError("need one label per embedding")
        X.flags.writeable = False
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "ids", ids)
        object.__setattr__(self, "labels", labels)

    def __len__(self):
        return self.X.shape[0]

    @property
    def dim(self):
        return self.X.shape[1]

    def index(self):
        return {k: i for i, k in enumerate(self.ids)}

    def rows(self, ids):
        idx = self.index()
        try:
            return self.X[[idx[i] for i in ids]]
        except KeyError as e:
            raise KeyError(f"unknown embedding id {e.args[0]!r}") from None

    def subset(self, mask_or_index):
        sel = np.arange(len(self))[mask_or_index]
        labels = None if self.labels is None else [self.labels[i] for i in sel]
        return EmbeddingSet(self.X[sel], [self.ids[i] for i in sel], labels)


# --- binary format -----------------------------------------------------------
#
# "TPEMB01\n", N and D as little-endian uint64, N*D little-endian float32
# (row-major), N ids as (uint32 byte length, UTF-8 bytes), one byte label flag,
# then if the flag is 1, N labels in the same string encoding.


def _pack_str(s):
    b = s.encode("utf-8")
    return struct.pack("<I", len(b)) + b


def save_embeddings(es, path):
    parts = [EMB_MAGIC, struct.pack("<QQ", len(es), es.dim if len(es) else es.X.shape[1])]
    parts.append(np.ascontiguousarray(es.X, dtype="<f4").tobytes())
    parts.extend(_pack_str(i) for i in es.ids)
    parts.append(b"\x01" if es.labels is not None else b"\x00")
    if es.labels is not None:
        parts.extend(_pack_str(s) for s in es.labels)
    with open(path, "wb") as f:
        f.write(b"".join(parts))


class _Reader:
    def __init__(self, data):
        self.data, self.pos = data, 0

    def take(self, n):
        if self.pos + n > len(self.data):
            raise ValueError("truncated embedding file")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def string(self):
        (n,) = struct.unpack("<I", self.take(4))
        return self.take(n).decode("utf-8")


def load_embeddings(path):
    with open(path, "rb") as f:
        data = f.read()
    r = _Reader(data)
    if r.take(len(EMB_MAGIC)) != EMB_MAGIC:
        raise ValueError(f"{path}: not a TPEMB01 embedding file")
    N, D = struct.unpack("<QQ", r.take(16))
    X = np.frombuffer(r.take(4 * N * D), dtype="<f4").reshape(N, D).astype(float)
    ids = [r.string() for _ in range(N)]
    flag = r.take(1)
    labels = [r.string() for _ in range(N)] if flag == b"\x01" else None
    if r.pos != len(data):
        raise ValueError(f"{path}: trailing bytes after embedding table")
    return EmbeddingSet(X, ids, labels)


def load_text_embeddings(path, labels=None):
    """Whitespace-separated rows, id in the first column. ``labels`` maps id -> speaker."""
    ids, rows = [], []
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            parts = line.split()
            if not parts:
                continue
            ids.append(parts[0])
            try:
                rows.append([float(v) for v in parts[1:]])
            except ValueError:
                raise ValueError(f"{path}:{ln}: non-numeric value") from None
    if len({len(r) for r in rows}) > 1:
        raise ValueError(f"{path}: rows have different dimensions")
    X = np.array(rows, dtype=float).reshape(len(rows), len(rows[0]) if rows else 0)
    lab = None
    if labels is not None:
        lab = [labels[i] for i in ids]
    return EmbeddingSet(X, ids, lab)


def save_text_embeddings(es, path):
    with open(path, "w") as f:
        for i, row in zip(es.ids, es.X):
            f.write(i + " " + " ".join(repr(float(v)) for v in row) + "\n")


def read_pairs(path):
    """Two-column tab- or whitespace-separated file as a list of (key, value)."""
    out = []
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 2:
                raise ValueError(f"{path}:{ln}: expected two columns")
            out.append((parts[0], parts[1]))
    return out


def load_any(path, labels_path=None):
    """Binary TPEMB01 file, or the plain-text format with an optional id->speaker file."""
    with open(path, "rb") as f:
        head = f.read(len(EMB_MAGIC))
    if head == EMB_MAGIC:
        es = load_embeddings(path)
        if labels_path is None:
            return es
        return EmbeddingSet(es.X, es.ids, [dict(read_pairs(labels_path))[i] for i in es.ids])
    labels = dict(read_pairs(labels_path)) if labels_path else None
    return load_text_embeddings(path, labels)


# --- preprocessing -----------------------------------------------------------


@dataclass(frozen=True)
class Preprocessor:
    """Centering, then an optional linear projection, then length normalization."""

    mean: np.ndarray
    projection: np.ndarray = None

    @property
    def out_dim(self):
        return self.mean.size if self.projection is None else self.projection.shape[1]

    def save(self, path):
        proj = self.projection
        with open(path, "wb") as f:
            f.write(PREP_MAGIC)
            f.write(struct.pack("<QQ", self.mean.size, 0 if proj is None else proj.shape[1]))
            f.write(np.asarray(self.mean, dtype="<f8").tobytes())
            if proj is not None:
                f.write(np.ascontiguousarray(proj, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as f:
            data = f.read()
        r = _Reader(data)
        if r.take(len(PREP_MAGIC)) != PREP_MAGIC:
            raise ValueError(f"{path}: not a preprocessor file")
        D, k = struct.unpack("<QQ", r.take(16))
        mean = np.frombuffer(r.take(8 * D), dtype="<f8").astype(float)
        proj = None
        if k:
            proj = np.frombuffer(r.take(8 * D * k), dtype="<f8").reshape(D, k).astype(float)
        return cls(mean, proj)


def lda(X, labels, dim):
    """
    Fisher LDA: leading generalized eigenvectors of (between, within) scatter,
    with the within-class scatter regularized by 1e-6 * trace / D. Each
    eigenvector's largest-magnitude entry is made positive.
    """
    X = np.asarray(X, dtype=float)
    classes, inv = np.unique(np.asarray(labels), return_inverse=True)
    inv = inv.ravel()
    D = X.shape[1]
    if not 1 <= dim <= min(D, len(classes) - 1):
        raise ValueError(
            f"LDA dimension {dim} exceeds the rank bound min(D={D}, classes-1={len(classes) - 1})")
    mu = X.mean(axis=0)
    counts = np.bincount(inv)
    cmeans = np.zeros((len(classes), D))
    np.add.at(cmeans, inv, X)
    cmeans /= counts[:, None]
    within = X - cmeans[inv]
    Sw = within.T @ within
    between = (cmeans - mu) * np.sqrt(counts)[:, None]
    Sb = between.T @ between
    Sw += (1e-6 * np.trace(Sw) / D + 1e-300) * np.eye(D)
    lam, V = eigh(Sb, Sw)
    V = V[:, np.argsort(lam)[::-1][:dim]]
    big = np.argmax(np.abs(V), axis=0)
    V *= np.sign(V[big, np.arange(dim)])
    return V


def fit_preprocessor(train: EmbeddingSet, lda_dim=None):
    """Mean of the training set, plus an LDA projection when lda_dim is given (labels needed)."""
    if len(train) == 0:
        raise ValueError("cannot fit a preprocessor on an empty set")
    mean = train.X.mean(axis=0)
    proj = None
    if lda_dim is not None:
        if train.labels is None:
            raise ValueError("LDA needs speaker labels")
        proj = lda(train.X - mean, train.labels, lda_dim)
    return Preprocessor(mean, proj)


def length_normalize(X, ids=None):
    X = np.asarray(X, dtype=float)
    norms = np.linalg.norm(X, axis=1, keepdims=True)
    bad = np.flatnonzero(norms[:, 0] == 0)
    if bad.size:
        which = ids[bad[0]] if ids is not None else int(bad[0])
        raise ValueError(f"embedding {which!r} is zero after centering/projection")
    return X / norms


def apply_preprocessor(prep: Preprocessor, es: EmbeddingSet):
    """
    Subtract the mean, project, length-normalize. Not idempotent: a second
    application subtracts the mean again from already-normalized rows.
    """
    if es.dim != prep.mean.size:
        raise ValueError(f"preprocessor expects D={prep.mean.size}, got {es.dim}")
    Y = es.X - prep.mean
    if prep.projection is not None:
        Y = Y @ prep.projection
    return EmbeddingSet(length_normalize(Y, es.ids), es.ids, es.labels)


# --- synthetic data ----------------------------------------------------------


def synth_generate(model, speakers, per_speaker, seed=None):
    """
    Sample a labelled dataset from the generative model: per speaker draw
    z_i ~ V(v_i, gamma_i), per observation y_ti ~ V(v_i, gamma_i) and
    x_t ~ V(mu_t, kappa).
    """
    rng = np.random.default_rng(seed)
    s = model.structure
    T = speakers * per_speaker
    spk = np.repeat(np.arange(speakers), per_speaker)
    mu = np.zeros((T, s.D))
    for i in range(s.n):
        rows = speakers if i < s.m else T
        h = sample_natural(np.tile(model.prior_natural(i), (rows, 1)), rng)
        if i < s.m:
            h = h[spk]
        mu += model.w[i] * (h @ model.K(i).T)
    mu /= np.linalg.norm(mu, axis=1, keepdims=True)
    X = sample_natural(model.kappa * mu, rng)
    width = len(str(max(speakers - 1, 0)))
    uw = len(str(max(per_speaker - 1, 0)))
    labels = [f"spk{k:0{width}d}" for k in spk]
    ids = [f"spk{k:0{width}d}-{t:0{uw}d}" for k, t in zip(spk, np.tile(np.arange(per_speaker), speakers))]
    return EmbeddingSet(X, ids, labels)
