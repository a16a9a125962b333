"""Linear systems, Gaussian mixtures and the primitives shared by the filters.

Mixtures are stored as stacked arrays (``weights`` ``(C,)``, ``means``
``(C, n)``, ``covs`` ``(C, n, n)``) so that filter banks can broadcast over
components without Python loops.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np
from scipy.special import logsumexp

LOG_2PI = np.log(2.0 * np.pi)

SYM_TOL = 1e-10
PSD_TOL = 1e-10
WEIGHT_TOL = 1e-12
DEFAULT_JITTER = 1e-9
DEFAULT_DT = 0.1080


class MixtureError(ValueError):
    """Raised for malformed mixtures or components."""


def constant_velocity_matrices(dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(F, H)`` for a 1-axis position/velocity model observed in position."""
    F = np.array([[1.0, dt], [0.0, 1.0]])
    H = np.array([[1.0, 0.0]])
    return F, H


@dataclass(frozen=True, eq=False)
class LinearSystem:
    """Dynamics ``x_k = F x_{k-1} + v_k`` observed through ``z_k = H x_k + w_k``."""

    F: np.ndarray
    H: np.ndarray
    dt: float = DEFAULT_DT

    def __post_init__(self):
        F = np.atleast_2d(np.asarray(self.F, dtype=float))
        H = np.atleast_2d(np.asarray(self.H, dtype=float))
        if F.shape[0] != F.shape[1]:
            raise ValueError(f"F must be square, got {F.shape}")
        if H.shape[1] != F.shape[0]:
            raise ValueError(f"H must be n_z x {F.shape[0]}, got {H.shape}")
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        object.__setattr__(self, "F", F)
        object.__setattr__(self, "H", H)

    @classmethod
    def constant_velocity(cls, dt: float = DEFAULT_DT) -> "LinearSystem":
        F, H = constant_velocity_matrices(dt)
        return cls(F, H, dt)

    @property
    def n_x(self) -> int:
        return self.F.shape[0]

    @property
    def n_z(self) -> int:
        return self.H.shape[0]

    def with_dt(self, dt: float) -> "LinearSystem":
        """Rebuild the system for another time step.

        Only the constant-velocity structure knows how ``F`` depends on the
        step, so any other ``F`` is rejected unless ``dt`` is unchanged.
        """
        if dt == self.dt:
            return self
        F_cv, H_cv = constant_velocity_matrices(self.dt)
        if self.F.shape != F_cv.shape or not np.array_equal(self.F, F_cv):
            raise ValueError("with_dt is only defined for constant-velocity systems")
        return LinearSystem(constant_velocity_matrices(dt)[0], self.H, dt)


@dataclass(frozen=True, eq=False)
class GaussianComponent:
    weight: float
    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.asarray(self.cov, dtype=float).reshape(mean.size, mean.size)
        if self.weight < 0:
            raise MixtureError(f"negative weight {self.weight}")
        _check_covariance(cov)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.size


def _check_covariance(cov: np.ndarray) -> None:
    if not np.allclose(cov, np.swapaxes(cov, -1, -2), rtol=0.0, atol=SYM_TOL):
        raise MixtureError("covariance is not symmetric")
    sym = 0.5 * (cov + np.swapaxes(cov, -1, -2))
    if np.min(np.linalg.eigvalsh(sym)) < -PSD_TOL:
        raise MixtureError("covariance is not positive semidefinite")


@dataclass(frozen=True, eq=False)
class GaussianMixture:
    """Finite Gaussian mixture with stacked component parameters."""

    weights: np.ndarray
    means: np.ndarray
    covs: np.ndarray

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        C = w.size
        means = np.asarray(self.means, dtype=float).reshape(C, -1)
        n = means.shape[1]
        covs = np.asarray(self.covs, dtype=float).reshape(C, n, n)
        if np.any(w < 0):
            raise MixtureError("mixture weights must be nonnegative")
        if abs(w.sum() - 1.0) > WEIGHT_TOL:
            raise MixtureError(f"mixture weights sum to {w.sum()!r}, not 1")
        _check_covariance(covs)
        for name, arr in (("weights", w), ("means", means), ("covs", covs)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @classmethod
    def from_components(cls, components: Sequence[GaussianComponent]) -> "GaussianMixture":
        if not components:
            raise MixtureError("a mixture needs at least one component")
        dims = {c.dim for c in components}
        if len(dims) != 1:
            raise MixtureError(f"components disagree on dimension: {sorted(dims)}")
        return cls(
            [c.weight for c in components],
            np.stack([c.mean for c in components]),
            np.stack([c.cov for c in components]),
        )

    @classmethod
    def scalar(cls, weights, means, variances) -> "GaussianMixture":
        """Univariate mixture from plain lists of weights, means and variances."""
        return cls(weights, np.reshape(means, (-1, 1)), np.reshape(variances, (-1, 1, 1)))

    @classmethod
    def gaussian(cls, mean, cov) -> "GaussianMixture":
        mean = np.atleast_1d(np.asarray(mean, dtype=float))
        return cls([1.0], mean[None], np.reshape(cov, (1, mean.size, mean.size)))

    @classmethod
    def from_config(cls, cfg: dict, normalize: bool = False) -> "GaussianMixture":
        """Build from ``{"weights": [...], "means": [[...]], "covs": [[[...]]]}``.

        ``normalize`` rescales weights that were rounded for publication and
        no longer sum to one exactly.
        """
        unknown = set(cfg) - {"weights", "means", "covs"}
        if unknown:
            raise MixtureError(f"unknown mixture keys: {sorted(unknown)}")
        try:
            weights = np.asarray(cfg["weights"], dtype=float)
            means, covs = cfg["means"], cfg["covs"]
        except KeyError as exc:
            raise MixtureError(f"mixture config missing key {exc}") from None
        if normalize:
            weights = weights / weights.sum()
        return cls(weights, means, covs)

    def to_config(self) -> dict:
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covs": self.covs.tolist(),
        }

    @property
    def n_components(self) -> int:
        return self.weights.size

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def components(self) -> list[GaussianComponent]:
        return [GaussianComponent(w, m, P) for w, m, P in self]

    def __iter__(self) -> Iterator[tuple[float, np.ndarray, np.ndarray]]:
        return iter(zip(self.weights, self.means, self.covs))

    def __len__(self) -> int:
        return self.n_components

    def logpdf(self, x: np.ndarray, jitter: float | None = None) -> np.ndarray:
        """Log-density at points ``x`` of shape ``(..., dim)``."""
        x = np.asarray(x, dtype=float)
        if self.dim == 1 and (x.ndim == 0 or x.shape[-1] != 1):
            x = x[..., None]
        diff = x[..., None, :] - self.means
        comp = _batched_logpdf(diff, self.covs, jitter)
        with np.errstate(divide="ignore"):
            logw = np.log(self.weights)
        return logsumexp(comp + logw, axis=-1)


@dataclass(frozen=True)
class LabeledSample:
    value: np.ndarray
    component_index: int


def _cholesky(cov: np.ndarray, jitter: float | None) -> np.ndarray:
    try:
        return np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        if not jitter:
            raise
        eye = np.eye(cov.shape[-1])
        return np.linalg.cholesky(cov + jitter * eye)


def _batched_logpdf(diff: np.ndarray, covs: np.ndarray, jitter: float | None) -> np.ndarray:
    L = _cholesky(covs, jitter)
    n = covs.shape[-1]
    logdet = 2.0 * np.sum(np.log(np.diagonal(L, axis1=-2, axis2=-1)), axis=-1)
    L_inv = np.linalg.inv(L)
    sol = np.einsum("...ij,...j->...i", L_inv, diff)
    maha = np.sum(sol**2, axis=-1)
    return -0.5 * (n * LOG_2PI + logdet + maha)


def gaussian_logpdf(x, mean, cov, jitter: float | None = None) -> float:
    """Exact multivariate normal log-density via Cholesky.

    Raises ``numpy.linalg.LinAlgError`` when ``cov`` is not SPD and no
    ``jitter`` is given.
    """
    mean = np.atleast_1d(np.asarray(mean, dtype=float))
    x = np.atleast_1d(np.asarray(x, dtype=float))
    cov = np.asarray(cov, dtype=float).reshape(mean.size, mean.size)
    return float(_batched_logpdf(x - mean, cov, jitter))


def sample_mixture(
    mix: GaussianMixture, rng: np.random.Generator, n: int
) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``n`` labelled samples: pick a component by weight, then draw from it.

    Returns ``(values, labels)`` with shapes ``(n, dim)`` and ``(n,)``. Use
    :func:`labeled_samples` for the per-sample record form.
    """
    if n < 0:
        raise ValueError("sample count must be nonnegative")
    labels = rng.choice(mix.n_components, size=n, p=mix.weights)
    # covariances may be rank deficient, so factor with eigh instead of cholesky
    vals, vecs = np.linalg.eigh(mix.covs)
    roots = vecs * np.sqrt(np.clip(vals, 0.0, None))[..., None, :]
    eps = rng.standard_normal((n, mix.dim))
    values = mix.means[labels] + np.einsum("nij,nj->ni", roots[labels], eps)
    return values, labels


def labeled_samples(mix: GaussianMixture, rng: np.random.Generator, n: int) -> list[LabeledSample]:
    values, labels = sample_mixture(mix, rng, n)
    return [LabeledSample(v, int(i)) for v, i in zip(values, labels)]


def moment_match(mix: GaussianMixture) -> GaussianComponent:
    """Single Gaussian with the mixture's mean and covariance."""
    mean, cov = moment_match_arrays(mix.weights, mix.means, mix.covs)
    return GaussianComponent(1.0, mean, cov)


def moment_match_arrays(weights, means, covs) -> tuple[np.ndarray, np.ndarray]:
    """Moment matching over the component axis (``-1`` for weights).

    Broadcasts over leading batch axes: ``weights (..., C)``, ``means
    (..., C, n)``, ``covs (..., C, n, n)``.
    """
    mean = np.einsum("...c,...ci->...i", weights, means)
    d = means - mean[..., None, :]
    cov = np.einsum("...c,...cij->...ij", weights, covs) + np.einsum(
        "...c,...ci,...cj->...ij", weights, d, d
    )
    return mean, 0.5 * (cov + np.swapaxes(cov, -1, -2))


def kl_to_moment_matched(
    mix: GaussianMixture,
    n_samples: int,
    rng: np.random.Generator,
    jitter: float | None = None,
) -> float:
    """Monte-Carlo KL divergence (nats) from the mixture to its moment match."""
    if n_samples < 1000:
        raise ValueError("n_samples must be at least 1000")
    if mix.n_components == 1:
        return 0.0
    mm = moment_match(mix)
    x, _ = sample_mixture(mix, rng, n_samples)
    log_p = mix.logpdf(x, jitter=jitter)
    log_q = _batched_logpdf(x - mm.mean, mm.cov, jitter)
    return max(float(np.mean(log_p - log_q)), 0.0)


@dataclass(frozen=True, eq=False)
class NoiseModel:
    """Process and measurement noise mixtures.

    ``process`` is either over the full state-noise vector or over a
    scalar velocity disturbance, in which case :meth:`lifted_process` maps
    it into the state through the random-walk-velocity direction
    ``g = [dt, 1]``.
    """

    process: GaussianMixture
    measurement: GaussianMixture
    _lift_cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    def lifted_process(self, sys: LinearSystem, dt: float | None = None) -> GaussianMixture:
        dt = sys.dt if dt is None else dt
        if self.process.dim == sys.n_x:
            return self.process
        if self.process.dim != 1 or sys.n_x != 2:
            raise MixtureError(
                f"cannot embed {self.process.dim}-D process noise into a {sys.n_x}-D state"
            )
        if dt not in self._lift_cache:
            self._lift_cache[dt] = lift_velocity_noise(self.process, dt)
        return self._lift_cache[dt]

    def check(self, sys: LinearSystem) -> None:
        self.lifted_process(sys)
        if self.measurement.dim != sys.n_z:
            raise MixtureError(
                f"measurement noise is {self.measurement.dim}-D, system has n_z={sys.n_z}"
            )


def lift_velocity_noise(process: GaussianMixture, dt: float) -> GaussianMixture:
    """Embed scalar velocity noise as ``v_k * [dt, 1]``; covariances become rank 1."""
    g = np.array([dt, 1.0])
    means = process.means[:, :1] * g
    covs = process.covs[:, :1, :1] * np.outer(g, g)
    return GaussianMixture(process.weights, means, covs)
