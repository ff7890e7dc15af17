"""Log-linear next-token policy over hashed context n-grams, with a copy term.

The weight matrix has ``V + k`` columns.  For a context with active feature
rows ``f`` the summed row ``z = sum_f W[f]`` gives token logits ``z[:V]``
plus, for each window offset ``j`` (1 = last token), ``z[V + j - 1]`` added to
the logit of the token sitting at that offset.  The copy columns let one
weight express "repeat the token three back" for every token at once.

Gradients are analytic:

* token column ``v``:   ``d log pi(y) / d W[f, v] = 1[v == y] - p_v``
* copy column ``j``:    ``d log pi(y) / d W[f, V+j-1] = 1[w_j == y] - p[w_j]``

for every active row ``f`` (``w_j`` is the token at offset ``j``), and zero on
inactive rows.
"""

from __future__ import annotations

import functools
import math
import itertools
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np
from scipy import sparse

MASK64 = (1 << 64) - 1
FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
_UNIGRAM_TAG = 1
_SUFFIX_TAG = 2


class NonFiniteGradient(ValueError):
    pass


def _mix(h: int, x: int) -> int:
    return ((h ^ (x & MASK64)) * FNV_PRIME) & MASK64


def _finalize(h: int) -> int:
    h ^= h >> 33
    h = (h * 0xFF51AFD7ED558CCD) & MASK64
    h ^= h >> 33
    h = (h * 0xC4CEB9FE1A85EC53) & MASK64
    h ^= h >> 33
    return h


def hash_index(h: int, feature_dim: int) -> int:
    """Map a 64-bit key to a non-bias row in ``[1, feature_dim)``."""
    return 1 + _finalize(h) % (feature_dim - 1)


@dataclass(frozen=True)
class ContextFeatures:
    """Active feature rows plus the trailing window, most recent token first."""

    rows: tuple[int, ...]
    window: tuple[int, ...] = ()

    def __post_init__(self):
        if not self.rows:
            raise ValueError("a context needs at least one active feature")


FeaturesLike = Union[ContextFeatures, Sequence[int]]


def as_features(f: FeaturesLike) -> ContextFeatures:
    """Accept a bare sequence of rows as features with no copy window."""
    if isinstance(f, ContextFeatures):
        return f
    return ContextFeatures(tuple(sorted(set(int(i) for i in f))))


@functools.lru_cache(maxsize=1 << 16)
def _unigram_row(offset: int, tok: int, feature_dim: int) -> int:
    return hash_index(_mix(_mix(_mix(FNV_OFFSET, _UNIGRAM_TAG), offset), tok), feature_dim)


_SUFFIX_SEED = _mix(FNV_OFFSET, _SUFFIX_TAG)


def featurize(context: Sequence[int], k: int, feature_dim: int) -> ContextFeatures:
    """Features of the trailing ``k`` tokens of ``context``.

    Row 0 is a bias that is always active.  The window contributes, for each
    n in 1..k, the hashed suffix n-gram (the last n tokens), and additionally
    every window token keyed by its offset from the end (offset 1 coincides
    with the suffix unigram).  Rows are sorted and unique.
    """
    if feature_dim < 2:
        raise ValueError("feature_dim must be >= 2")
    window = tuple(reversed(context[-k:])) if k > 0 else ()
    rows = {0}
    h_suffix = _SUFFIX_SEED
    for offset, tok in enumerate(window, start=1):
        h_suffix = _mix(h_suffix, tok)
        if offset >= 2:
            rows.add(hash_index(h_suffix, feature_dim))
        rows.add(_unigram_row(offset, tok, feature_dim))
    return ContextFeatures(tuple(sorted(rows)), window)


@dataclass
class PolicyParams:
    weights: np.ndarray
    feature_window: int

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 2:
            raise ValueError("weights must be a 2-D (F, V + k) matrix")
        F = self.weights.shape[0]
        if F < 2 or self.feature_window < 1 or self.vocab_size < 2:
            raise ValueError(f"need F >= 2, V >= 2, k >= 1; got shape {self.weights.shape}, "
                             f"k={self.feature_window}")
        if not np.all(np.isfinite(self.weights)):
            raise ValueError("weights must be finite")

    @classmethod
    def zeros(cls, feature_dim: int, vocab_size: int, feature_window: int) -> "PolicyParams":
        return cls(np.zeros((feature_dim, vocab_size + feature_window)), feature_window)

    @property
    def feature_dim(self) -> int:
        return self.weights.shape[0]

    @property
    def vocab_size(self) -> int:
        return self.weights.shape[1] - self.feature_window

    def featurize(self, context: Sequence[int]) -> ContextFeatures:
        return featurize(context, self.feature_window, self.feature_dim)

    def copy(self) -> "PolicyParams":
        return PolicyParams(self.weights.copy(), self.feature_window)


_snapshot_ids = itertools.count()


class PolicySnapshot:
    """Frozen copy of a :class:`PolicyParams` (the old and the reference policy)."""

    __slots__ = ("_weights", "_feature_window", "snapshot_id")

    def __init__(self, params: PolicyParams, snapshot_id: int | None = None):
        w = params.weights.copy()
        w.setflags(write=False)
        object.__setattr__(self, "_weights", w)
        object.__setattr__(self, "_feature_window", params.feature_window)
        object.__setattr__(self, "snapshot_id", next(_snapshot_ids) if snapshot_id is None else snapshot_id)

    def __setattr__(self, name, value):
        raise AttributeError("PolicySnapshot is immutable")

    @property
    def weights(self) -> np.ndarray:
        return self._weights

    @property
    def feature_window(self) -> int:
        return self._feature_window

    feature_dim = PolicyParams.feature_dim
    vocab_size = PolicyParams.vocab_size
    featurize = PolicyParams.featurize

    def to_params(self) -> PolicyParams:
        return PolicyParams(self._weights.copy(), self._feature_window)

    def __eq__(self, other):
        if not isinstance(other, PolicySnapshot):
            return NotImplemented
        return self._feature_window == other._feature_window and np.array_equal(self._weights, other._weights)

    __hash__ = None


Policy = Union[PolicyParams, PolicySnapshot]


def snapshot(p: Policy) -> PolicySnapshot:
    if isinstance(p, PolicySnapshot):
        p = p.to_params()
    return PolicySnapshot(p)


def logits(p: Policy, features: FeaturesLike) -> np.ndarray:
    f = as_features(features)
    V = p.vocab_size
    z = p.weights[list(f.rows)].sum(axis=0)
    out = z[:V].copy()
    for j, tok in enumerate(f.window):
        out[tok] += z[V + j]
    return out


def log_softmax(z: np.ndarray) -> np.ndarray:
    if z.ndim == 1:
        z = z - z.max()
        return z - math.log(np.exp(z).sum())
    z = z - np.max(z, axis=-1, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=-1, keepdims=True))


def log_probs(p: Policy, features: FeaturesLike) -> np.ndarray:
    return log_softmax(logits(p, features))


def sample_token(p: Policy, features: FeaturesLike, rng: np.random.Generator) -> tuple[int, float]:
    """Draw a token at temperature 1; the returned log-prob is exactly ``log_probs(p, f)[token]``."""
    lp = log_probs(p, features)
    cdf = np.cumsum(np.exp(lp))
    token = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    token = min(token, lp.shape[0] - 1)
    return token, float(lp[token])


def greedy_token(p: Policy, features: FeaturesLike) -> tuple[int, float]:
    lp = log_probs(p, features)
    token = int(np.argmax(lp))
    return token, float(lp[token])


@dataclass(frozen=True)
class SparseGrad:
    """Gradient restricted to a few weight rows: ``values[i]`` is the gradient of row ``rows[i]``."""

    rows: np.ndarray
    values: np.ndarray

    def add_to(self, dense: np.ndarray, scale: float = 1.0) -> np.ndarray:
        np.add.at(dense, self.rows, scale * self.values)
        return dense

    def to_dense(self, feature_dim: int, n_columns: int) -> np.ndarray:
        return self.add_to(np.zeros((feature_dim, n_columns)))


def _logit_grad_to_columns(dlogits: np.ndarray, window: Sequence[int], k: int) -> np.ndarray:
    """Chain a gradient over token logits to the ``V + k`` weight columns."""
    copy = np.zeros(k)
    for j, tok in enumerate(window):
        copy[j] = dlogits[tok]
    return np.concatenate([dlogits, copy])


def grad_log_prob(p: Policy, features: FeaturesLike, y: int) -> SparseGrad:
    f = as_features(features)
    V = p.vocab_size
    if not 0 <= y < V:
        raise ValueError(f"token {y} outside vocabulary of size {V}")
    rows = np.asarray(f.rows, dtype=np.int64)
    d = -np.exp(log_probs(p, f))
    d[y] += 1.0
    g = _logit_grad_to_columns(d, f.window, p.feature_window)
    return SparseGrad(rows, np.tile(g, (len(rows), 1)))


class FeatureBatch:
    """Many contexts stacked as a sparse incidence matrix for vectorized logits and gradients."""

    def __init__(self, features: Sequence[FeaturesLike], feature_window: int, feature_dim: int | None = None):
        feats = [as_features(f) for f in features]
        k = feature_window
        lengths = np.fromiter((len(f.rows) for f in feats), dtype=np.int64, count=len(feats))
        rows = np.fromiter((i for f in feats for i in f.rows), dtype=np.int64, count=int(lengths.sum()))
        if feature_dim is None:
            feature_dim = int(rows.max()) + 1 if rows.size else 1
        indptr = np.concatenate(([0], np.cumsum(lengths)))
        self.incidence = sparse.csr_matrix((np.ones(rows.size), rows, indptr), shape=(len(feats), feature_dim))
        self.n = len(feats)
        self.k = k
        window = np.full((len(feats), k), -1, dtype=np.int64)
        for t, f in enumerate(feats):
            if len(f.window) > k:
                raise ValueError("context window longer than the policy's feature window")
            window[t, :len(f.window)] = f.window
        self._wt, self._wj = np.nonzero(window >= 0)
        self._wv = window[self._wt, self._wj]

    @classmethod
    def from_records(cls, records, policy: Policy) -> "FeatureBatch":
        feats = []
        for r in records:
            if r.features is None:
                raise ValueError("agent record carries no observation features")
            if r.features.rows[-1] >= policy.feature_dim:
                raise ValueError("record features do not fit this policy's feature dimension")
            feats.append(r.features)
        return cls(feats, policy.feature_window, policy.feature_dim)

    def _check(self, F: int) -> None:
        if self.incidence.shape[1] > F:
            raise ValueError("features do not fit this policy's feature dimension")

    def logits(self, p: Policy) -> np.ndarray:
        V = p.vocab_size
        if self.n == 0:
            return np.zeros((0, V))
        self._check(p.feature_dim)
        W = p.weights[: self.incidence.shape[1]]
        z = np.asarray(self.incidence @ W)
        out = z[:, :V].copy()
        flat = np.bincount(self._wt * V + self._wv, weights=z[self._wt, V + self._wj], minlength=self.n * V)
        return out + flat.reshape(self.n, V)

    def log_probs(self, p: Policy) -> np.ndarray:
        return log_softmax(self.logits(p))

    def column_grad(self, dlogits: np.ndarray) -> np.ndarray:
        """Per-context gradient over the ``V + k`` weight columns."""
        copy = np.zeros((self.n, self.k))
        copy[self._wt, self._wj] = dlogits[self._wt, self._wv]
        return np.concatenate([dlogits, copy], axis=1)

    def scatter(self, dlogits: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
        """Dense weight gradient given the gradient with respect to each context's token logits."""
        self._check(shape[0])
        grad = np.zeros(shape)
        grad[: self.incidence.shape[1]] = self.incidence.T @ self.column_grad(dlogits)
        return grad

    def sparse_norm(self, dlogits: np.ndarray) -> float:
        return float(np.linalg.norm(self.incidence.T @ self.column_grad(dlogits)))


def apply_gradient(p: PolicyParams, g: Union[np.ndarray, SparseGrad], lr: float) -> PolicyParams:
    """Gradient *ascent* in place: ``weights += lr * g``."""
    if lr < 0:
        raise ValueError("lr must be non-negative")
    if isinstance(g, SparseGrad):
        if not np.all(np.isfinite(g.values)):
            raise NonFiniteGradient("gradient has non-finite entries")
        g.add_to(p.weights, lr)
    else:
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient("gradient has non-finite entries")
        if lr != 0:
            p.weights += lr * g
    if not np.all(np.isfinite(p.weights)):
        raise NonFiniteGradient("update produced non-finite weights")
    return p


def clip_grad_norm(g: np.ndarray, max_norm: float | None) -> tuple[np.ndarray, float]:
    norm = float(np.linalg.norm(g))
    if max_norm is not None and norm > max_norm > 0:
        g = g * (max_norm / norm)
    return g, norm


# --- checkpoint format -------------------------------------------------------


def save_checkpoint(p: Policy, path) -> None:
    """Header ``F=<int>\\tV=<int>\\tk=<int>``, then one row of ``V + k`` weights per line."""
    with open(path, "w") as fh:
        fh.write(f"F={p.feature_dim}\tV={p.vocab_size}\tk={p.feature_window}\n")
        for row in p.weights:
            fh.write(" ".join(repr(float(x)) for x in row))
            fh.write("\n")


def load_checkpoint(path) -> PolicyParams:
    with open(path) as fh:
        header = dict(part.split("=", 1) for part in fh.readline().strip().split("\t"))
        F, V, k = int(header["F"]), int(header["V"]), int(header["k"])
        weights = np.loadtxt(fh, dtype=np.float64, ndmin=2)
    if weights.shape != (F, V + k):
        raise ValueError(f"checkpoint body has shape {weights.shape}, header says {(F, V + k)}")
    return PolicyParams(weights, k)
