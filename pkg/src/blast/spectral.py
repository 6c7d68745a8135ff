"""Spectral estimation of shared and study-specific latent factors.

Given per-study data matrices Y_s (n_s x p), the estimator proceeds in four
steps: (1) per-study right singular bases V_s; (2) the averaged projector
P-tilde = (1/S) sum_s V_s V_s^T, whose leading singular vectors V-bar span the
shared directions; (3) study-specific factors from Y_s with the shared
directions projected out; (4) shared factors from the stacked matrices with
the study-specific factors regressed out.  Projectors are always represented
by their orthonormal bases; no p x p matrix is ever materialized.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, DegenerateSignalError, DimensionError
from .numerics import _check_matrix, truncated_svd

_RANK_TOL = 1e-12


@dataclass(frozen=True)
class MultiStudyDataset:
    """Ordered per-study observation matrices over a common outcome set."""

    studies: tuple
    outcome_names: tuple | None = None

    def __post_init__(self):
        studies = tuple(_check_matrix(y, f"study {s}") for s, y in enumerate(self.studies))
        if len(studies) < 1:
            raise DataError("dataset needs at least one study")
        p = studies[0].shape[1]
        if p < 2:
            raise DataError(f"need at least 2 outcomes, got p={p}")
        for s, y in enumerate(studies):
            if y.shape[1] != p:
                raise DimensionError(
                    f"study {s} has p={y.shape[1]}, expected {p} (all studies share outcomes)"
                )
            if y.shape[0] < 2:
                raise DataError(f"study {s} has n_s={y.shape[0]} < 2")
        if self.outcome_names is not None:
            names = tuple(self.outcome_names)
            if len(names) != p:
                raise DimensionError(f"{len(names)} outcome names for p={p} outcomes")
            object.__setattr__(self, "outcome_names", names)
        object.__setattr__(self, "studies", studies)

    @property
    def n_studies(self):
        return len(self.studies)

    @property
    def n_s(self):
        return tuple(y.shape[0] for y in self.studies)

    @property
    def n_total(self):
        return sum(self.n_s)

    @property
    def p(self):
        return self.studies[0].shape[1]

    def center_columns(self) -> "MultiStudyDataset":
        """Return a copy with per-study column means removed."""
        return MultiStudyDataset(
            tuple(y - y.mean(axis=0, keepdims=True) for y in self.studies),
            self.outcome_names,
        )


@dataclass(frozen=True)
class LatentDims:
    """Shared rank k0 plus per-study total (k_s) and specific (q_s) ranks."""

    k0: int
    k_s: tuple
    q_s: tuple

    def __post_init__(self):
        object.__setattr__(self, "k_s", tuple(int(k) for k in self.k_s))
        object.__setattr__(self, "q_s", tuple(int(q) for q in self.q_s))
        if self.k0 < 1:
            raise DimensionError(f"k0 must be >= 1, got {self.k0}")
        if len(self.k_s) != len(self.q_s):
            raise DimensionError("k_s and q_s must have one entry per study")
        for s, (k, q) in enumerate(zip(self.k_s, self.q_s)):
            if q != k - self.k0 or q < 0:
                raise DimensionError(
                    f"study {s}: need q_s = k_s - k0 >= 0, got k0={self.k0} k_s={k} q_s={q}"
                )

    @classmethod
    def from_ranks(cls, k0, k_s):
        return cls(k0=int(k0), k_s=tuple(k_s), q_s=tuple(int(k) - int(k0) for k in k_s))

    def validate_for(self, dataset: MultiStudyDataset):
        if len(self.k_s) != dataset.n_studies:
            raise DimensionError(
                f"dims describe {len(self.k_s)} studies, dataset has {dataset.n_studies}"
            )
        for s, (k, n) in enumerate(zip(self.k_s, dataset.n_s)):
            if k > min(n, dataset.p):
                raise DimensionError(
                    f"study {s}: k_s={k} exceeds min(n_s, p)={min(n, dataset.p)}"
                )


@dataclass(frozen=True)
class FactorEstimates:
    """Estimator outputs: factors, shared-signal matrix, and its SVD pieces.

    m_hat = sqrt(n) u_c, so m_hat^T m_hat = n I_k0 exactly; f_hat_s =
    sqrt(n_s) u_perp_s likewise.  m_hat_s^T f_hat_s = 0 by construction.
    """

    m_hat: np.ndarray                # n x k0, stacked shared factors
    m_hat_s: tuple                   # per-study n_s x k0 blocks of m_hat
    f_hat_s: tuple                   # per-study n_s x q_s specific factors
    y_c: np.ndarray                  # n x p shared-signal matrix
    u_c: np.ndarray                  # n x k0
    d_c: np.ndarray                  # k0 nonincreasing singular values
    v_c: np.ndarray                  # p x k0
    u_perp_s: tuple                  # per-study n_s x q_s
    p_tilde_spectrum: np.ndarray     # singular values of the averaged projector
    n_s: tuple = field(default=())

    @property
    def n_total(self):
        return sum(self.n_s)

    @property
    def k0(self):
        return self.m_hat.shape[1]

    @property
    def p(self):
        return self.y_c.shape[1]


def study_right_basis(y_s, k_s) -> np.ndarray:
    """Leading-k_s right singular vectors of one study (p x k_s).

    The projection P_s = V_s V_s^T is represented by this basis only.
    """
    y_s = _check_matrix(y_s, "y_s")
    fac = truncated_svd(y_s, k_s)
    if fac.singvals[-1] < _RANK_TOL * max(fac.singvals[0], _RANK_TOL):
        raise DegenerateSignalError(
            f"singular value {k_s} of the study matrix is numerically zero; "
            f"rank below the requested k_s={k_s}"
        )
    return fac.right


def shared_basis(bases, k0, weights=None):
    """Shared directions from averaged per-study projectors.

    Factorizes P-tilde = sum_s w_s V_s V_s^T = W W^T through the p x (sum k_s)
    concatenation W of the weight-scaled bases, so its singular values come
    from s_j(W)^2 without forming any p x p matrix.  Returns (v_bar, spectrum)
    with v_bar the leading-k0 singular vectors and `spectrum` the full
    singular-value spectrum of P-tilde.
    """
    bases = [_check_matrix(v, f"basis {s}") for s, v in enumerate(bases)]
    p = bases[0].shape[0]
    for s, v in enumerate(bases):
        if v.shape[0] != p:
            raise DimensionError(f"basis {s} has p={v.shape[0]}, expected {p}")
    min_k = min(v.shape[1] for v in bases)
    if not 1 <= k0 <= min_k:
        raise DimensionError(f"k0={k0} exceeds the smallest basis rank {min_k}")
    if weights is None:
        weights = np.full(len(bases), 1.0 / len(bases))
    else:
        weights = np.asarray(weights, dtype=np.float64)
        weights = weights / weights.sum()
    w = np.hstack([np.sqrt(wt) * v for wt, v in zip(weights, bases)])
    full = min(w.shape)
    fac = truncated_svd(w, full)
    spectrum = fac.singvals**2
    v_bar = fac.left[:, :k0]
    return v_bar, spectrum


def specific_factors(y_s, v_bar, q_s):
    """Specific factors of one study after removing the shared directions.

    Computes Y_s with its shared-span component projected out and returns
    (f_hat_s, u_perp_s) where f_hat_s = sqrt(n_s) u_perp_s holds the leading
    q_s left singular vectors.  q_s = 0 yields empty (n_s x 0) factors.
    """
    y_s = _check_matrix(y_s, "y_s")
    v_bar = _check_matrix(v_bar, "v_bar")
    if y_s.shape[1] != v_bar.shape[0]:
        raise DimensionError(f"y_s has p={y_s.shape[1]} but v_bar has p={v_bar.shape[0]}")
    n_s = y_s.shape[0]
    if q_s == 0:
        empty = np.zeros((n_s, 0))
        return empty, empty
    y_perp = y_s - (y_s @ v_bar) @ v_bar.T
    fac = truncated_svd(y_perp, q_s)
    # degeneracy is judged against the scale of the input, not the residual
    scale = max(float(np.linalg.norm(y_s)), _RANK_TOL)
    if fac.singvals[-1] < _RANK_TOL * scale:
        raise DegenerateSignalError(
            f"residual signal after removing shared directions has rank < q_s={q_s}"
        )
    u_perp = fac.left
    return np.sqrt(n_s) * u_perp, u_perp


def shared_factors(dataset: MultiStudyDataset, u_perp_s, k0):
    """Shared factors from the stacked studies with specific factors removed.

    Each study block is Y_s minus its projection onto u_perp_s; the stack is
    decomposed once and m_hat = sqrt(n) u_c.  Returns
    (m_hat, m_hat_s, y_c, u_c, d_c, v_c).
    """
    blocks = []
    for y_s, u_perp in zip(dataset.studies, u_perp_s):
        if u_perp.shape[1] == 0:
            blocks.append(y_s.copy())
        else:
            blocks.append(y_s - u_perp @ (u_perp.T @ y_s))
    y_c = np.vstack(blocks)
    n = y_c.shape[0]
    fac = truncated_svd(y_c, k0)
    if fac.singvals[-1] < _RANK_TOL * max(fac.singvals[0], _RANK_TOL):
        raise DegenerateSignalError(f"shared-signal matrix has numerical rank < k0={k0}")
    m_hat = np.sqrt(n) * fac.left
    m_hat_s = _split_rows(m_hat, dataset.n_s)
    return m_hat, m_hat_s, y_c, fac.left, fac.singvals, fac.right


def _split_rows(stacked, n_s):
    offsets = np.cumsum((0,) + tuple(n_s))
    return tuple(stacked[offsets[s] : offsets[s + 1]] for s in range(len(n_s)))


def estimate_factors(
    dataset: MultiStudyDataset,
    dims: LatentDims,
    weighting="uniform",
    threads=1,
) -> FactorEstimates:
    """Run the full four-step factor estimator.

    `weighting` selects uniform projector averaging (default) or sample-size
    weighting ("by_n").  Per-study steps may run on `threads` workers; the
    result is identical to sequential execution.
    """
    dims.validate_for(dataset)
    if weighting not in ("uniform", "by_n"):
        raise DimensionError(f"unknown projection weighting {weighting!r}")
    weights = None
    if weighting == "by_n":
        weights = np.asarray(dataset.n_s, dtype=np.float64) / dataset.n_total

    bases = _study_map(
        lambda s: study_right_basis(dataset.studies[s], dims.k_s[s]),
        dataset.n_studies,
        threads,
    )
    v_bar, spectrum = shared_basis(bases, dims.k0, weights=weights)
    specific = _study_map(
        lambda s: specific_factors(dataset.studies[s], v_bar, dims.q_s[s]),
        dataset.n_studies,
        threads,
    )
    f_hat_s = tuple(f for f, _ in specific)
    u_perp_s = tuple(u for _, u in specific)
    m_hat, m_hat_s, y_c, u_c, d_c, v_c = shared_factors(dataset, u_perp_s, dims.k0)
    return FactorEstimates(
        m_hat=m_hat,
        m_hat_s=m_hat_s,
        f_hat_s=f_hat_s,
        y_c=y_c,
        u_c=u_c,
        d_c=d_c,
        v_c=v_c,
        u_perp_s=u_perp_s,
        p_tilde_spectrum=spectrum,
        n_s=dataset.n_s,
    )


def _study_map(fn, n_studies, threads):
    if threads <= 1 or n_studies <= 1:
        return [fn(s) for s in range(n_studies)]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, range(n_studies)))
