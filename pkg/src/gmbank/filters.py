"""Kalman filter, Gaussian sum filter and the AMMSE filter bank.

Every routine broadcasts over leading batch axes so a whole Monte-Carlo
ensemble can be stepped at once. Hypotheses ``(i, j)`` (process component
``i``, measurement component ``j``) are flattened onto a single axis in
lexicographic order, ``h = i * C_w + j``.

Shape legend: ``...`` batch, ``Cv``/``Cw`` component counts, ``K = Cv * Cw``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, replace

import numpy as np
from scipy.special import logsumexp

from .mixture import (
    LOG_2PI,
    GaussianComponent,
    GaussianMixture,
    LinearSystem,
    NoiseModel,
    moment_match,
    moment_match_arrays,
)

PRUNE_THRESHOLD = 1e-12
SINGULAR_TOL = 1e-12
DEFAULT_PRIOR_VAR = 1e3


class FilterKind(str, enum.Enum):
    KALMAN = "kalman"
    GSF = "gsf"
    AMMSE = "ammse"
    MATCHED = "matched"


class ReductionScheme(str, enum.Enum):
    MERGE = "merge"
    REMOVE = "remove"


class FilterError(RuntimeError):
    """Numerical failure inside a filter step; ``step`` is set by :func:`run_filter`."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step


class SingularGainError(FilterError):
    pass


class ImpossibleMeasurementError(FilterError):
    pass


@dataclass(frozen=True, eq=False)
class GaussianEstimate:
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=float))
        object.__setattr__(self, "cov", np.asarray(self.cov, dtype=float))

    @classmethod
    def diffuse(cls, n_x: int, batch_shape=(), var: float = DEFAULT_PRIOR_VAR):
        mean = np.zeros(tuple(batch_shape) + (n_x,))
        cov = np.broadcast_to(var * np.eye(n_x), tuple(batch_shape) + (n_x, n_x)).copy()
        return cls(mean, cov)


@dataclass(frozen=True, eq=False)
class Innovations:
    """Per-hypothesis innovations with the factored innovation covariance."""

    nu: np.ndarray  # (..., K, nz)
    S: np.ndarray  # (..., K, nz, nz)
    S_inv: np.ndarray  # (..., K, nz, nz)
    loglik: np.ndarray  # (..., K)
    proc_idx: np.ndarray  # (K,)
    meas_idx: np.ndarray  # (K,)


@dataclass(frozen=True, eq=False)
class GainWorkspace:
    U: np.ndarray  # (..., nx)  sum_h mu_h u_h
    S_vec: np.ndarray  # (..., nx)  sum_h mu_h W_h nu_h
    A: np.ndarray  # (..., K, nx, nz)
    B: np.ndarray  # (..., K, nz)   row vectors
    denom: np.ndarray  # (...,)
    active: np.ndarray  # (..., K) bool
    fallback: np.ndarray  # (...,) bool, GSF gains substituted


def _sym(P: np.ndarray) -> np.ndarray:
    return 0.5 * (P + np.swapaxes(P, -1, -2))


# two-operand einsum beats batched matmul on the tiny per-hypothesis matrices
def _mm(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    return np.einsum("...ij,...jk->...ik", A, B)


def _mv(A: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.einsum("...ij,...j->...i", A, x)


def _T(A: np.ndarray) -> np.ndarray:
    return np.swapaxes(A, -1, -2)


def hypothesis_index(n_proc: int, n_meas: int) -> tuple[np.ndarray, np.ndarray]:
    """Process/measurement component index of each flattened hypothesis."""
    return np.repeat(np.arange(n_proc), n_meas), np.tile(np.arange(n_meas), n_proc)


def spd_inverse(S: np.ndarray, jitter: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Inverse and log-determinant of SPD matrices from one Cholesky factorisation."""
    try:
        L = np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        if not jitter:
            raise FilterError("innovation covariance is not SPD") from None
        try:
            L = np.linalg.cholesky(S + jitter * np.eye(S.shape[-1]))
        except np.linalg.LinAlgError:
            raise FilterError("innovation covariance is not SPD after jitter") from None
    L_inv = np.linalg.inv(L)
    logdet = 2.0 * np.sum(np.log(np.diagonal(L, axis1=-2, axis2=-1)), axis=-1)
    return _T(L_inv) @ L_inv, logdet


def _component_arrays(c: GaussianComponent | tuple) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(c, GaussianComponent):
        return c.mean, c.cov
    mean, cov = c
    return np.asarray(mean, dtype=float), np.asarray(cov, dtype=float)


def _kalman_arrays(F, H, x, P, u, Q, b, R, z, jitter=None):
    xp = _mv(F, x) + u
    Pp = _mm(_mm(F, P), F.T) + Q
    nu = z - _mv(H, xp) - b
    S = _mm(_mm(H, Pp), H.T) + R
    S_inv, _ = spd_inverse(S, jitter)
    W = _mm(_mm(Pp, H.T), S_inv)
    return xp + _mv(W, nu), _sym(Pp - _mm(_mm(W, S), _T(W)))


def kalman_step(
    sys: LinearSystem,
    prior: GaussianEstimate,
    q: GaussianComponent,
    r: GaussianComponent,
    z,
    jitter: float | None = None,
) -> GaussianEstimate:
    """One predict/update cycle with Gaussian process noise ``q`` and measurement noise ``r``."""
    u, Q = _component_arrays(q)
    b, R = _component_arrays(r)
    z = np.asarray(z, dtype=float)
    if z.ndim == prior.mean.ndim - 1 or z.shape[-1:] != (sys.n_z,):
        z = z[..., None]
    mean, cov = _kalman_arrays(sys.F, sys.H, prior.mean, prior.cov, u, Q, b, R, z, jitter)
    return GaussianEstimate(mean, cov)


def bank_predict(
    sys: LinearSystem, prior: GaussianEstimate, process: GaussianMixture
) -> tuple[np.ndarray, np.ndarray]:
    """Predict the reduced prior through every process component.

    Returns means ``(..., Cv, nx)`` and covariances ``(..., Cv, nx, nx)``.
    """
    if process.dim != sys.n_x or prior.mean.shape[-1] != sys.n_x:
        raise ValueError(
            f"dimension mismatch: n_x={sys.n_x}, process noise {process.dim}, "
            f"prior {prior.mean.shape[-1]}"
        )
    F = sys.F
    mean = _mv(F, prior.mean)[..., None, :] + process.means
    cov = _mm(_mm(F, prior.cov), F.T)[..., None, :, :] + process.covs
    return mean, cov


def bank_innovations(
    sys: LinearSystem,
    pred_means: np.ndarray,
    pred_covs: np.ndarray,
    measurement: GaussianMixture,
    z,
    jitter: float | None = None,
) -> Innovations:
    """Innovation, its covariance and log-likelihood for every hypothesis."""
    H = sys.H
    Cv, Cw = pred_means.shape[-2], measurement.n_components
    proc, meas = hypothesis_index(Cv, Cw)
    z = np.asarray(z, dtype=float)
    if z.ndim == pred_means.ndim - 2 or z.shape[-1:] != (sys.n_z,):
        z = z[..., None]
    zhat = _mv(H, pred_means)  # (..., Cv, nz)
    nu = z[..., None, :] - zhat[..., proc, :] - measurement.means[meas]
    HPH = _mm(_mm(H, pred_covs), H.T)
    S = HPH[..., proc, :, :] + measurement.covs[meas]
    S_inv, logdet = spd_inverse(S, jitter)
    maha = np.sum(nu * _mv(S_inv, nu), axis=-1)
    loglik = -0.5 * (sys.n_z * LOG_2PI + logdet + maha)
    return Innovations(nu, S, S_inv, loglik, proc, meas)


def update_mode_probabilities(w, p, loglik: np.ndarray) -> np.ndarray:
    """Posterior hypothesis weights ``mu_ij ∝ w_i p_j Λ_ij``, normalised in log space."""
    with np.errstate(divide="ignore"):
        log_prior = np.add.outer(np.log(np.asarray(w, float)), np.log(np.asarray(p, float)))
    a = np.asarray(loglik, dtype=float) + log_prior.ravel()
    top = np.max(a, axis=-1)
    if not np.all(np.isfinite(top)):
        raise ImpossibleMeasurementError("measurement impossible under model")
    return np.exp(a - logsumexp(a, axis=-1, keepdims=True))


def gsf_gains(pred_covs_h: np.ndarray, sys: LinearSystem, innov: Innovations) -> np.ndarray:
    """Kalman gain of every mode-matched filter, ``(..., K, nx, nz)``."""
    return _mm(_mm(pred_covs_h, sys.H.T), innov.S_inv)


def gsf_update(pred_means_h, pred_covs_h, innov: Innovations, W):
    """Mode-matched Kalman posterior using the optimal-gain covariance form."""
    means = pred_means_h + _mv(W, innov.nu)
    covs = _sym(pred_covs_h - _mm(_mm(W, innov.S), _T(W)))
    return means, covs


def ammse_offset(
    pred_covs_h: np.ndarray,
    sys: LinearSystem,
    innov: Innovations,
    mu: np.ndarray,
    u_h: np.ndarray,
    on_singular: str = "raise",
    prune: float = PRUNE_THRESHOLD,
) -> GainWorkspace:
    """Closed-form common offset ``S_vec`` and the per-hypothesis terms ``A``, ``B``.

    Entries flagged in ``fallback`` carry a meaningless ``S_vec``.
    """
    if on_singular not in ("raise", "fallback"):
        raise ValueError(f"on_singular must be 'raise' or 'fallback', got {on_singular!r}")
    nu, S_inv = innov.nu, innov.S_inv
    active = mu >= prune
    mu_a = np.where(active, mu, 0.0)

    U = np.einsum("...k,...ki->...i", mu, u_h)
    PHt = _mm(pred_covs_h, sys.H.T)
    s_nu = _mv(S_inv, nu)
    a = np.sum(nu * s_nu, axis=-1)
    # (S + nu nu^T)^-1 by Sherman-Morrison, reusing the factored S
    M_inv = S_inv - s_nu[..., :, None] * s_nu[..., None, :] / (1.0 + a)[..., None, None]
    B = s_nu / (1.0 + a)[..., None]
    A = _mm(PHt + (U[..., None, :] - u_h)[..., :, None] * nu[..., None, :], M_inv)

    num = np.einsum("...k,...ki->...i", mu_a, _mv(A, nu))
    # 1 - sum mu B nu, written without cancellation since B nu = a / (1 + a)
    denom = (1.0 - np.sum(mu_a, axis=-1)) + np.sum(mu_a / (1.0 + a), axis=-1)
    singular = ~(np.abs(denom) >= SINGULAR_TOL)
    if np.any(singular) and on_singular == "raise":
        raise SingularGainError(f"gain denominator {np.min(np.abs(denom)):.3e} is singular")
    S_vec = num / np.where(singular, 1.0, denom)[..., None]
    return GainWorkspace(U, S_vec, A, B, denom, active, singular)


def ammse_gains(
    pred_covs_h: np.ndarray,
    sys: LinearSystem,
    innov: Innovations,
    mu: np.ndarray,
    u_h: np.ndarray,
    on_singular: str = "raise",
    prune: float = PRUNE_THRESHOLD,
) -> tuple[np.ndarray, GainWorkspace]:
    """Gains minimising the trace of the merged bank covariance.

    The per-hypothesis gains are coupled only through the common offset
    ``S_vec = sum mu W nu``; solving for it in closed form gives
    ``W = A + S_vec B``. Hypotheses with ``mu < prune`` drop out of the
    sums and get a zero gain.

    ``on_singular="fallback"`` replaces the gains of batch entries whose
    closed-form denominator vanishes with the GSF gains and flags them in
    ``GainWorkspace.fallback``; the default raises :class:`SingularGainError`.
    """
    ws = ammse_offset(pred_covs_h, sys, innov, mu, u_h, on_singular, prune)
    W = ws.A + ws.S_vec[..., None, :, None] * ws.B[..., None, :]
    W = np.where(ws.active[..., None, None], W, 0.0)
    if np.any(ws.fallback):
        W = np.where(ws.fallback[..., None, None, None], gsf_gains(pred_covs_h, sys, innov), W)
        S_vec = np.where(ws.fallback[..., None],
                         np.einsum("...k,...ki->...i", mu, _mv(W, innov.nu)), ws.S_vec)
        ws = replace(ws, S_vec=S_vec)
    return W, ws


def ammse_update(pred_means_h, pred_covs_h, sys: LinearSystem, innov: Innovations, W):
    """Posterior for arbitrary gains (full four-term covariance expression)."""
    H = sys.H
    means = pred_means_h + _mv(W, innov.nu)
    WHP = _mm(_mm(W, H), pred_covs_h)
    covs = _sym(pred_covs_h - WHP - _T(WHP) + _mm(_mm(W, innov.S), _T(W)))
    return means, covs


def joint_covariance(mu, means, covs) -> np.ndarray:
    """Covariance of the bank mixture; the objective the AMMSE gains minimise."""
    return moment_match_arrays(mu, means, covs)[1]


def reduce(mu, means, covs, scheme: ReductionScheme | str) -> GaussianEstimate:
    """Collapse a weighted bank to one Gaussian by merging or by keeping the argmax."""
    scheme = ReductionScheme(scheme)
    mu = np.asarray(mu, dtype=float)
    if mu.shape[-1] == 0:
        raise ValueError("cannot reduce an empty bank")
    if scheme is ReductionScheme.MERGE:
        return GaussianEstimate(*moment_match_arrays(mu, means, covs))
    best = np.argmax(mu, axis=-1)
    return GaussianEstimate(_take(means, best), _take(covs, best))


def _take(arr: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Select hypothesis ``idx[...]`` along axis ``-3``/``-2`` of a stacked array."""
    extra = arr.ndim - np.ndim(idx) - 1
    ix = np.reshape(idx, np.shape(idx) + (1,) * (extra + 1))
    return np.take_along_axis(arr, ix, axis=np.ndim(idx))[(Ellipsis, 0) + (slice(None),) * extra]


def matched_step(
    sys: LinearSystem,
    prior: GaussianEstimate,
    process: GaussianMixture,
    measurement: GaussianMixture,
    label,
    z,
    jitter: float | None = None,
) -> GaussianEstimate:
    """Mode-matched update using the known active components ``label = (i, j)``."""
    if label is None:
        raise ValueError("the matched filter needs the active-model labels")
    label = np.asarray(label)
    i, j = label[..., 0], label[..., 1]
    z = np.asarray(z, dtype=float)
    if z.ndim == prior.mean.ndim - 1 or z.shape[-1:] != (sys.n_z,):
        z = z[..., None]
    mean, cov = _kalman_arrays(
        sys.F, sys.H, prior.mean, prior.cov,
        process.means[i], process.covs[i], measurement.means[j], measurement.covs[j],
        z, jitter,
    )
    return GaussianEstimate(mean, cov)


def ammse_mse(ammse_est: GaussianEstimate, gsf_merge_est: GaussianEstimate) -> np.ndarray:
    """MSE of the AMMSE estimate about the merged GSF posterior."""
    if ammse_est.mean.shape != gsf_merge_est.mean.shape:
        raise ValueError("estimates have different shapes")
    d = gsf_merge_est.mean - ammse_est.mean
    return gsf_merge_est.cov + d[..., :, None] * d[..., None, :]


@dataclass(frozen=True, eq=False)
class BankStep:
    """Result of one bank cycle.

    ``hyp_means``/``hyp_covs`` hold every hypothesis posterior unless the
    REMOVE scheme skipped them (then they are ``None``).
    """

    estimate: GaussianEstimate
    mu: np.ndarray
    hyp_means: np.ndarray | None
    hyp_covs: np.ndarray | None
    gains: np.ndarray | None
    workspace: GainWorkspace | None
    fallback: np.ndarray


def update_stage(
    kind: FilterKind | str,
    scheme: ReductionScheme | str,
    sys: LinearSystem,
    pred_means_h: np.ndarray,
    pred_covs_h: np.ndarray,
    innov: Innovations,
    mu: np.ndarray,
    u_h: np.ndarray,
    on_singular: str = "raise",
    full: bool = False,
) -> BankStep:
    """Gains, hypothesis posteriors and reduction, given predictions and weights.

    With ``REMOVE`` only the argmax hypothesis posterior is formed unless
    ``full`` is set; the AMMSE variant still needs every hypothesis for the
    common offset.
    """
    kind, scheme = FilterKind(kind), ReductionScheme(scheme)
    if kind not in (FilterKind.GSF, FilterKind.AMMSE):
        raise ValueError(f"bank filters are gsf/ammse, not {kind.value}")
    xp_h, Pp_h = pred_means_h, pred_covs_h
    remove_only = scheme is ReductionScheme.REMOVE and not full

    if kind is FilterKind.GSF:
        fallback = np.zeros(mu.shape[:-1], dtype=bool)
        if remove_only:
            best = np.argmax(mu, axis=-1)
            P_b = _take(Pp_h, best)
            W = _mm(_mm(P_b, sys.H.T), _take(innov.S_inv, best))
            nu_b, S_b = _take(innov.nu, best), _take(innov.S, best)
            mean = _take(xp_h, best) + _mv(W, nu_b)
            cov = _sym(P_b - _mm(_mm(W, S_b), _T(W)))
            return BankStep(GaussianEstimate(mean, cov), mu, None, None, None, None, fallback)
        W = gsf_gains(Pp_h, sys, innov)
        means, covs = gsf_update(xp_h, Pp_h, innov, W)
        return BankStep(reduce(mu, means, covs, scheme), mu, means, covs, W, None, fallback)

    if remove_only:
        # the offset needs every hypothesis, the gain itself only the kept one
        ws = ammse_offset(Pp_h, sys, innov, mu, u_h, on_singular=on_singular)
        best = np.argmax(mu, axis=-1)
        P_b, S_b = _take(Pp_h, best), _take(innov.S, best)
        W_b = _take(ws.A, best) + ws.S_vec[..., :, None] * _take(ws.B, best)[..., None, :]
        if np.any(ws.fallback):
            K_b = _mm(_mm(P_b, sys.H.T), _take(innov.S_inv, best))
            W_b = np.where(ws.fallback[..., None, None], K_b, W_b)
        mean = _take(xp_h, best) + _mv(W_b, _take(innov.nu, best))
        WHP = _mm(_mm(W_b, sys.H), P_b)
        cov = _sym(P_b - WHP - _T(WHP) + _mm(_mm(W_b, S_b), _T(W_b)))
        return BankStep(GaussianEstimate(mean, cov), mu, None, None, None, ws, ws.fallback)
    W, ws = ammse_gains(Pp_h, sys, innov, mu, u_h, on_singular=on_singular)
    means, covs = ammse_update(xp_h, Pp_h, sys, innov, W)
    return BankStep(reduce(mu, means, covs, scheme), mu, means, covs, W, ws, ws.fallback)


def bank_step(
    kind: FilterKind | str,
    scheme: ReductionScheme | str,
    sys: LinearSystem,
    prior: GaussianEstimate,
    process: GaussianMixture,
    measurement: GaussianMixture,
    z,
    jitter: float | None = None,
    on_singular: str = "raise",
    full: bool = False,
) -> BankStep:
    """One GSF or AMMSE cycle from the reduced prior to the reduced posterior.

    ``process`` must already live in state space (see
    :meth:`NoiseModel.lifted_process`).
    """
    xp, Pp = bank_predict(sys, prior, process)
    innov = bank_innovations(sys, xp, Pp, measurement, z, jitter)
    mu = update_mode_probabilities(process.weights, measurement.weights, innov.loglik)
    proc = innov.proc_idx
    return update_stage(
        kind, scheme, sys, xp[..., proc, :], Pp[..., proc, :, :], innov, mu,
        process.means[proc], on_singular=on_singular, full=full,
    )


@dataclass(frozen=True, eq=False)
class FilterRun:
    """Reduced estimates of one (possibly batched) run, one entry per step."""

    kind: FilterKind
    scheme: ReductionScheme | None
    means: np.ndarray  # (..., N, nx)
    covs: np.ndarray  # (..., N, nx, nx)
    max_mu: np.ndarray  # (..., N)
    fallback: np.ndarray  # (..., N) bool
    spread: np.ndarray  # (..., N) weighted spread of hypothesis means, NaN if not formed

    @property
    def estimates(self) -> list[GaussianEstimate]:
        n = self.means.shape[-2]
        return [GaussianEstimate(self.means[..., k, :], self.covs[..., k, :, :]) for k in range(n)]

    @property
    def n_fallback(self) -> int:
        return int(np.sum(self.fallback))


def run_filter(
    kind: FilterKind | str,
    scheme: ReductionScheme | str | None,
    sys: LinearSystem,
    noise: NoiseModel,
    measurements,
    labels=None,
    prior: GaussianEstimate | None = None,
    dts=None,
    jitter: float | None = None,
    on_singular: str = "fallback",
) -> FilterRun:
    """Filter a measurement sequence ``(..., N, nz)`` (``(..., N)`` when ``nz == 1``).

    The bank is rebuilt every step from the reduced prior. ``labels`` are
    the true active components ``(..., N, 2)`` and are required only by the
    matched filter. ``dts`` gives a per-step time step for
    constant-velocity systems.
    """
    kind = FilterKind(kind)
    scheme = None if kind in (FilterKind.KALMAN, FilterKind.MATCHED) else ReductionScheme(scheme)
    z_all = np.asarray(measurements, dtype=float)
    if sys.n_z == 1 and (z_all.ndim == 1 or z_all.shape[-1] != 1):
        z_all = z_all[..., None]
    if z_all.ndim < 2 or z_all.shape[-2] == 0:
        raise ValueError("measurements must be a non-empty sequence")
    n_steps = z_all.shape[-2]
    batch = z_all.shape[:-2]
    if kind is FilterKind.MATCHED:
        if labels is None:
            raise ValueError("the matched filter needs the active-model labels")
        labels = np.asarray(labels)
        if labels.shape[:-1] != batch + (n_steps,):
            raise ValueError(f"labels shape {labels.shape} does not match measurements")
    noise.check(sys)
    if dts is not None:
        dts = np.broadcast_to(np.asarray(dts, dtype=float), (n_steps,))
    if prior is None:
        prior = GaussianEstimate.diffuse(sys.n_x, batch)
    else:
        prior = GaussianEstimate(
            np.broadcast_to(prior.mean, batch + (sys.n_x,)),
            np.broadcast_to(prior.cov, batch + (sys.n_x, sys.n_x)),
        )

    means = np.empty(batch + (n_steps, sys.n_x))
    covs = np.empty(batch + (n_steps, sys.n_x, sys.n_x))
    max_mu = np.ones(batch + (n_steps,))
    fallback = np.zeros(batch + (n_steps,), dtype=bool)
    spread = np.full(batch + (n_steps,), np.nan)

    est = prior
    for k in range(n_steps):
        sys_k = sys if dts is None else sys.with_dt(float(dts[k]))
        process = noise.lifted_process(sys_k, sys_k.dt)
        z = z_all[..., k, :]
        try:
            if kind is FilterKind.KALMAN:
                q = moment_match(process)
                r = moment_match(noise.measurement)
                est = kalman_step(sys_k, est, q, r, z, jitter)
            elif kind is FilterKind.MATCHED:
                est = matched_step(sys_k, est, process, noise.measurement, labels[..., k, :], z, jitter)
            else:
                step = bank_step(
                    kind, scheme, sys_k, est, process, noise.measurement, z,
                    jitter=jitter, on_singular=on_singular,
                )
                est = step.estimate
                max_mu[..., k] = np.max(step.mu, axis=-1)
                fallback[..., k] = step.fallback
                if step.hyp_means is not None:
                    d = step.hyp_means - est.mean[..., None, :]
                    spread[..., k] = np.einsum("...k,...ki,...ki->...", step.mu, d, d)
        except FilterError as exc:
            name = type(exc)
            raise name(str(exc), step=k) from exc
        means[..., k, :] = est.mean
        covs[..., k, :, :] = est.cov
    return FilterRun(kind, scheme, means, covs, max_mu, fallback, spread)
