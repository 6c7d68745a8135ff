"""Latent-dimension selection.

Per-study total ranks come from a penalized surrogate log-likelihood
(information criterion); the shared rank comes from the gap in the spectrum
of the averaged projector.  One SVD per study is computed and reused across
all candidate ranks.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateVarianceError, DimensionError
from .numerics import _check_matrix, truncated_svd
from .spectral import LatentDims, MultiStudyDataset, shared_basis

logger = logging.getLogger(__name__)

_VAR_FLOOR = 1e-12
DEFAULT_TAU = 0.2
DEFAULT_K_MAX_CAP = 30


@dataclass(frozen=True)
class RankSelectionConfig:
    """Settings for rank selection.

    k_max caps the per-study search (None resolves to min(30, min_s
    min(n_s, p) - 1)); tau is the spectral-gap threshold; nu0/sigma0_sq are
    the prior settings carried alongside the surrogate fit.
    """

    k_max: int | None = None
    tau: float = DEFAULT_TAU
    nu0: float = 1.0
    sigma0_sq: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise DimensionError(f"tau must lie in (0, 1), got {self.tau}")
        if self.k_max is not None and self.k_max < 1:
            raise DimensionError(f"k_max must be >= 1, got {self.k_max}")

    def resolve_k_max(self, dataset: MultiStudyDataset) -> int:
        cap = min(min(n, dataset.p) for n in dataset.n_s) - 1
        cap = max(cap, 1)
        if self.k_max is None:
            return min(DEFAULT_K_MAX_CAP, cap)
        if self.k_max > cap + 1:
            raise DimensionError(
                f"k_max={self.k_max} exceeds min_s min(n_s, p) = {cap + 1}"
            )
        return self.k_max


@dataclass(frozen=True)
class JicTrace:
    """Criterion values for one study over k = 1..k_max."""

    ks: np.ndarray
    loglik: np.ndarray
    jic: np.ndarray

    def penalty(self, n_s, p):
        return self.ks * max(n_s, p) * math.log(min(n_s, p))

    def to_dict(self):
        return {
            "k": [int(k) for k in self.ks],
            "loglik": [float(v) for v in self.loglik],
            "jic": [float(v) for v in self.jic],
        }


def _study_svd_summary(y_s, k_max):
    """One truncated SVD plus the column statistics reused for every k."""
    fac = truncated_svd(y_s, k_max)
    col_sq = np.sum(y_s**2, axis=0)
    # energy captured by each component, per outcome: (d_l * v_jl)^2
    comp_sq = (fac.right * fac.singvals) ** 2  # p x k_max
    return fac, col_sq, comp_sq


def _loglik_at_k(n_s, p, col_sq, comp_sq, k, tau_s_sq):
    resid_sq = col_sq - comp_sq[:, :k].sum(axis=1)
    resid_sq = np.maximum(resid_sq, 0.0)
    sigma_sq = resid_sq / n_s
    if np.any(sigma_sq < _VAR_FLOOR):
        raise DegenerateVarianceError(
            f"residual variance below {_VAR_FLOOR} at k={k}; "
            "rank saturates the data"
        )
    # Loadings are shrunk by n_s / (n_s + 1/tau^2); the fitted-signal part of
    # each column keeps (1 - shrink)^2 of its energy in the residual.
    shrink = n_s / (n_s + 1.0 / tau_s_sq)
    fit_sq = comp_sq[:, :k].sum(axis=1)
    resid_full = resid_sq + (1.0 - shrink) ** 2 * fit_sq
    loglik = (
        -0.5 * n_s * np.sum(np.log(sigma_sq))
        - 0.5 * np.sum(resid_full / sigma_sq)
        - 0.5 * n_s * p * math.log(2.0 * math.pi)
    )
    return float(loglik)


def _self_consistent_tau_sq(n_s, col_sq, comp_sq, k):
    """Prior-scale estimate at candidate rank k: signal energy over noise."""
    theta = comp_sq[:, :k].sum() / n_s
    omega = max((col_sq.sum() - comp_sq[:, :k].sum()) / n_s, 0.0)
    if omega <= 0.0 or theta <= 0.0:
        return 1.0
    return theta / (k * omega)


def surrogate_loglik(y_s, k, tau_s) -> float:
    """Gaussian log-likelihood at the rank-k spectral fit of one study.

    Factors are the leading-k left singular vectors scaled to norm sqrt(n_s),
    loadings their ridge conditional mean with prior scale tau_s, residual
    variances the per-outcome mean squared residual from the unshrunk
    projection.
    """
    y_s = _check_matrix(y_s, "y_s")
    n_s, p = y_s.shape
    if not 1 <= k <= min(n_s, p):
        raise DimensionError(f"k={k} outside [1, {min(n_s, p)}]")
    _, col_sq, comp_sq = _study_svd_summary(y_s, k)
    return _loglik_at_k(n_s, p, col_sq, comp_sq, k, float(tau_s) ** 2)


def select_study_rank(y_s, cfg: RankSelectionConfig):
    """Pick the per-study rank minimizing the penalized surrogate criterion.

    Ties break toward smaller k.  Returns (k_hat, JicTrace).
    """
    y_s = _check_matrix(y_s, "y_s")
    n_s, p = y_s.shape
    k_max = cfg.k_max if cfg.k_max is not None else min(DEFAULT_K_MAX_CAP, min(n_s, p) - 1)
    k_max = max(min(k_max, min(n_s, p)), 1)
    _, col_sq, comp_sq = _study_svd_summary(y_s, k_max)

    ks = np.arange(1, k_max + 1)
    loglik = np.empty(k_max)
    for i, k in enumerate(ks):
        tau_sq = _self_consistent_tau_sq(n_s, col_sq, comp_sq, int(k))
        loglik[i] = _loglik_at_k(n_s, p, col_sq, comp_sq, int(k), tau_sq)
    jic = -2.0 * loglik + ks * max(n_s, p) * math.log(min(n_s, p))
    k_hat = int(ks[np.argmin(jic)])  # argmin returns the first (smallest) k
    return k_hat, JicTrace(ks=ks, loglik=loglik, jic=jic)


def select_shared_rank(p_tilde_spectrum, k_hat_s, tau) -> int:
    """Count the leading averaged-projector singular values above 1 - tau.

    The count is capped at min_s k_hat_s.  Returns 0 when even the top value
    sits at or below the threshold (no shared structure).
    """
    spectrum = np.asarray(p_tilde_spectrum, dtype=np.float64)
    if spectrum.size == 0:
        raise DimensionError("empty spectrum")
    if not 0.0 < tau < 1.0:
        raise DimensionError(f"tau must lie in (0, 1), got {tau}")
    j_max = min(int(min(k_hat_s)), spectrum.size)
    return int(np.sum(spectrum[:j_max] > 1.0 - tau))


@dataclass(frozen=True)
class RankReport:
    """Everything rank selection produced; dims is None when no shared
    structure was found (k0 = 0)."""

    k0: int
    k_hat_s: tuple
    q_s: tuple
    traces: tuple
    spectrum: np.ndarray
    k_max: int

    @property
    def dims(self):
        if self.k0 == 0:
            return None
        return LatentDims(
            k0=self.k0,
            k_s=tuple(max(k, self.k0) for k in self.k_hat_s),
            q_s=self.q_s,
        )


def select_dims(dataset: MultiStudyDataset, cfg: RankSelectionConfig, weighting="uniform",
                threads=1) -> LatentDims:
    """Full selection: per-study ranks, then the shared rank, then q_s."""
    report = select_dims_report(dataset, cfg, weighting=weighting, threads=threads)
    if report.dims is None:
        from .errors import DegenerateSignalError

        raise DegenerateSignalError(
            f"no shared structure: top averaged-projector singular value "
            f"{report.spectrum[0]:.4f} <= 1 - tau = {1.0 - cfg.tau:.4f}"
        )
    return report.dims


def select_dims_report(dataset: MultiStudyDataset, cfg: RankSelectionConfig,
                       weighting="uniform", threads=1) -> RankReport:
    """Like select_dims but returns the full trace, including the k0 = 0 case."""
    k_max = cfg.resolve_k_max(dataset)
    eff_cfg = RankSelectionConfig(k_max=k_max, tau=cfg.tau, nu0=cfg.nu0,
                                  sigma0_sq=cfg.sigma0_sq)

    def one_study(s):
        k_hat, trace = select_study_rank(dataset.studies[s], eff_cfg)
        # Reuse the selection SVD for the basis at the chosen rank.
        fac = truncated_svd(dataset.studies[s], k_hat)
        return k_hat, trace, fac.right

    if threads > 1 and dataset.n_studies > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one_study, range(dataset.n_studies)))
    else:
        results = [one_study(s) for s in range(dataset.n_studies)]

    k_hat_s = [r[0] for r in results]
    traces = [r[1] for r in results]
    bases = [r[2] for r in results]
    for s, k_hat in enumerate(k_hat_s):
        if k_hat == k_max:
            logger.warning("event=k_max_saturated study=%d k_hat=%d k_max=%d", s, k_hat, k_max)

    weights = None
    if weighting == "by_n":
        weights = np.asarray(dataset.n_s, dtype=np.float64) / dataset.n_total
    _, spectrum = shared_basis(bases, 1, weights=weights)
    k0 = select_shared_rank(spectrum, k_hat_s, eff_cfg.tau)
    if k0 == 0:
        logger.warning("event=no_shared_structure top_singval=%.4f threshold=%.4f",
                       spectrum[0], 1.0 - eff_cfg.tau)
        q_s = tuple(k_hat_s)
    else:
        q_s = []
        for s, k_hat in enumerate(k_hat_s):
            q = k_hat - k0
            if q < 0:
                logger.warning("event=k_s_below_k0 study=%d k_hat=%d k0=%d", s, k_hat, k0)
                q = 0
            q_s.append(q)
        q_s = tuple(q_s)
    return RankReport(k0=k0, k_hat_s=tuple(k_hat_s), q_s=q_s, traces=tuple(traces),
                      spectrum=spectrum, k_max=k_max)
