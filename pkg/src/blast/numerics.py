"""Dense linear-algebra kernels and reproducible random-number streams.

All functions are pure; nothing here mutates its inputs, so every operation
is safe to call from multiple threads.
"""

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, DimensionError

# Smaller dimension above which a tall/wide SVD goes through the Gram matrix
# of the short side instead of LAPACK on the full matrix.
_GRAM_MIN_DIM = 512
# Gram path is only used while an eigendecomposition of the short side is
# affordable; beyond this we switch to iterative methods.
_GRAM_MAX_DIM = 4096


@dataclass(frozen=True)
class SvdFactors:
    """Top-r factors of a singular value decomposition.

    `left` is m x r and `right` is n x r, both with orthonormal columns;
    `singvals` is nonincreasing and nonnegative.  Signs follow a fixed
    convention: in each column of `right` the entry of largest magnitude is
    positive (ties broken by lowest index), and `left` flips accordingly.
    """

    left: np.ndarray
    singvals: np.ndarray
    right: np.ndarray

    @property
    def rank(self):
        return self.singvals.shape[0]

    def reconstruct(self):
        return (self.left * self.singvals) @ self.right.T


def _check_matrix(a, name="a"):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionError(f"{name} must be 2-dimensional, got ndim={a.ndim}")
    if not np.all(np.isfinite(a)):
        raise DataError(f"{name} contains non-finite entries")
    return a


def _apply_sign_convention(left, right):
    # Largest-|entry| of each right column made positive; first index wins ties.
    flips = np.ones(right.shape[1])
    for c in range(right.shape[1]):
        col = right[:, c]
        if col[np.argmax(np.abs(col))] < 0:
            flips[c] = -1.0
    return left * flips, right * flips


def _svd_lapack(a, r):
    u, s, vt = np.linalg.svd(a, full_matrices=False)
    return u[:, :r], s[:r], vt[:r].T


def _svd_gram(a, r):
    """Top-r SVD via eigendecomposition of the short-side Gram matrix.

    Returns None when the requested components are numerically degenerate,
    in which case the caller falls back to LAPACK.
    """
    m, n = a.shape
    transposed = m < n
    b = a.T if transposed else a  # b is tall: rows >= cols
    g = b.T @ b
    w, v = np.linalg.eigh(g)
    w = w[::-1][:r]
    v = v[:, ::-1][:, :r]
    # Squared singular values below this are not resolvable through the Gram
    # matrix; the reconstruction contract would be at risk.
    tiny = max(w[0], 1.0) * 1e-24
    if w[-1] <= tiny:
        return None
    s = np.sqrt(np.maximum(w, 0.0))
    u = (b @ v) / s
    if transposed:
        left, right = v, u
    else:
        left, right = u, v
    return left, s, right


def _svd_iterative(a, r):
    from scipy.sparse.linalg import svds

    u, s, vt = svds(a, k=r)
    order = np.argsort(s)[::-1]
    return u[:, order], s[order], vt[order].T


def truncated_svd(a, r) -> SvdFactors:
    """Top-r singular value decomposition with a deterministic sign convention.

    The reconstruction left @ diag(singvals) @ right.T is the best rank-r
    approximation of `a` in Frobenius norm.  Tall or wide inputs with a
    moderate short side are routed through the short-side Gram matrix so no
    factor larger than the input is ever formed.
    """
    a = _check_matrix(a)
    m, n = a.shape
    small = min(m, n)
    r = int(r)
    if not 1 <= r <= small:
        raise DimensionError(f"rank r={r} outside [1, {small}] for shape {a.shape}")

    out = None
    if small > _GRAM_MAX_DIM and r <= small // 8:
        out = _svd_iterative(a, r)
    elif small > _GRAM_MIN_DIM and r <= small // 8:
        out = _svd_gram(a, r)
    if out is None:
        out = _svd_lapack(a, r)
    left, s, right = out
    left, right = _apply_sign_convention(left, right)
    return SvdFactors(left=left, singvals=s, right=right)


def procrustes_rotation(a, b) -> np.ndarray:
    """Orthogonal r x r matrix R minimizing ||a R - b||_F."""
    a = _check_matrix(a, "a")
    b = _check_matrix(b, "b")
    if a.shape != b.shape:
        raise DimensionError(f"shape mismatch: {a.shape} vs {b.shape}")
    u, _, vt = np.linalg.svd(a.T @ b)
    return u @ vt


def _hash_key128(base_seed, path):
    h = hashlib.blake2b(digest_size=16)
    h.update(int(base_seed).to_bytes(8, "little", signed=True))
    for label in path:
        if isinstance(label, str):
            raw = label.encode("utf-8")
            h.update(b"s" + len(raw).to_bytes(4, "little") + raw)
        elif isinstance(label, (int, np.integer)):
            h.update(b"i" + int(label).to_bytes(8, "little", signed=True))
        else:
            raise DataError(f"stream path labels must be str or int, got {type(label)!r}")
    return int.from_bytes(h.digest(), "little")


@dataclass(frozen=True)
class RngStream:
    """Counter-based random stream identified by (base_seed, path).

    Two streams with equal (base_seed, path) yield byte-identical sequences;
    distinct paths give statistically independent streams.  Instances are
    immutable values, so the parallel schedule can never affect output.
    """

    base_seed: int
    path: tuple = field(default_factory=tuple)

    def child(self, *labels) -> "RngStream":
        return RngStream(self.base_seed, self.path + tuple(labels))

    def generator(self) -> np.random.Generator:
        key = _hash_key128(self.base_seed, self.path)
        return np.random.Generator(np.random.Philox(key=key))


def derive_stream(base_seed, path=()) -> RngStream:
    """Deterministic substream of the root seed for the given label path."""
    if isinstance(path, (str, int, np.integer)):
        path = (path,)
    return RngStream(int(base_seed), tuple(path))
