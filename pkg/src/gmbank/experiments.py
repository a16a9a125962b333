"""Synthetic scenarios, Monte-Carlo harness, separation sweeps and benchmarks."""

from __future__ import annotations

import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from . import stats
from .filters import (
    FilterError,
    FilterKind,
    FilterRun,
    GaussianEstimate,
    ReductionScheme,
    bank_innovations,
    bank_predict,
    bank_step,
    run_filter,
    update_mode_probabilities,
    update_stage,
)
from .mixture import (
    GaussianMixture,
    LinearSystem,
    NoiseModel,
    kl_to_moment_matched,
    sample_mixture,
)

log = logging.getLogger(__name__)

PRESET_ENV = "GMBANK_PRESET_DIR"
DEFAULT_HORIZON = 500
DEFAULT_PRIOR_VAR = 1.0
KL_SAMPLES = 10**6
MAX_EXCLUDED_FRACTION = 0.01

FilterSpec = tuple[FilterKind, "ReductionScheme | None"]

ALL_FILTERS: list[FilterSpec] = [
    (FilterKind.KALMAN, None),
    (FilterKind.MATCHED, None),
    (FilterKind.GSF, ReductionScheme.MERGE),
    (FilterKind.GSF, ReductionScheme.REMOVE),
    (FilterKind.AMMSE, ReductionScheme.MERGE),
    (FilterKind.AMMSE, ReductionScheme.REMOVE),
]


class SweepError(RuntimeError):
    pass


def filter_label(kind, scheme=None) -> str:
    kind = FilterKind(kind)
    if kind in (FilterKind.KALMAN, FilterKind.MATCHED) or scheme is None:
        return kind.value
    return f"{kind.value}-{ReductionScheme(scheme).value}"


def parse_filter(label: str) -> FilterSpec:
    """``"gsf-merge"`` -> ``(GSF, MERGE)``; ``"kalman"`` -> ``(KALMAN, None)``."""
    kind, _, scheme = label.lower().partition("-")
    kind = FilterKind(kind)
    if kind in (FilterKind.KALMAN, FilterKind.MATCHED):
        if scheme:
            raise ValueError(f"{kind.value} takes no reduction scheme")
        return kind, None
    return kind, ReductionScheme(scheme or "merge")


# --------------------------------------------------------------------------- scenarios


@dataclass(frozen=True, eq=False)
class Scenario:
    """A noise model on the 1-axis constant-velocity system plus run settings.

    ``prior_var`` scales the identity covariance of the filter prior, which
    is centred on the true initial state ``x_0 = 0``.
    """

    name: str
    sys: LinearSystem
    noise: NoiseModel
    c: float | None = None
    horizon: int = DEFAULT_HORIZON
    seed: int = 0
    prior_var: float = DEFAULT_PRIOR_VAR

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be at least one step")
        self.noise.check(self.sys)

    def replace(self, **changes) -> "Scenario":
        return replace(self, **changes)

    def prior(self) -> GaussianEstimate:
        return GaussianEstimate(np.zeros(self.sys.n_x), self.prior_var * np.eye(self.sys.n_x))


def preset_dir(path: str | os.PathLike | None = None):
    if path is not None:
        return Path(path)
    if os.environ.get(PRESET_ENV):
        return Path(os.environ[PRESET_ENV])
    return resources.files("gmbank") / "presets"


def preset_names(path=None) -> list[str]:
    return sorted(p.name[:-5] for p in preset_dir(path).iterdir() if p.name.endswith(".json"))


def load_preset_config(name: str, path=None) -> dict:
    target = preset_dir(path) / f"{name}.json"
    try:
        return json.loads(target.read_text())
    except FileNotFoundError:
        raise ValueError(f"unknown preset {name!r}; available: {preset_names(path)}") from None


def scenario_from_config(cfg: dict, c: float | None = None, **overrides) -> Scenario:
    """Build a scenario from a preset document.

    Presets flagged ``scale_means_by_c`` need ``c``: every component mean
    is multiplied by it. ``"measurement": "same_as_process"`` reuses the
    process mixture for the measurement noise.
    """
    known = {"name", "description", "dt", "process", "measurement",
             "scale_means_by_c", "normalize_weights"}
    unknown = set(cfg) - known
    if unknown:
        raise ValueError(f"unknown preset keys: {sorted(unknown)}")
    normalize = bool(cfg.get("normalize_weights", False))
    process = GaussianMixture.from_config(cfg["process"], normalize=normalize)
    meas_cfg = cfg["measurement"]
    measurement = (
        process if meas_cfg == "same_as_process"
        else GaussianMixture.from_config(meas_cfg, normalize=normalize)
    )
    if cfg.get("scale_means_by_c"):
        if c is None:
            raise ValueError(f"preset {cfg.get('name')!r} needs a separation c")
        process = GaussianMixture(process.weights, c * process.means, process.covs)
        measurement = GaussianMixture(measurement.weights, c * measurement.means, measurement.covs)
    elif c is not None:
        raise ValueError(f"preset {cfg.get('name')!r} has no separation parameter")
    sys = LinearSystem.constant_velocity(float(cfg.get("dt", 0.108)))
    return Scenario(cfg.get("name", "custom"), sys, NoiseModel(process, measurement), c=c, **overrides)


def load_preset(name: str, c: float | None = None, path=None, **overrides) -> Scenario:
    return scenario_from_config(load_preset_config(name, path), c=c, **overrides)


def separation_scenario(model: int, c: float, **overrides) -> Scenario:
    if model not in (1, 2, 3):
        raise ValueError("model must be 1, 2 or 3")
    return load_preset(f"model{model}", c=c, **overrides)


# --------------------------------------------------------------------------- trajectories


@dataclass(frozen=True, eq=False)
class Trajectory:
    states: np.ndarray  # (..., N, nx)
    measurements: np.ndarray  # (..., N, nz)
    labels: np.ndarray  # (..., N, 2) active (process, measurement) components

    @property
    def positions(self) -> np.ndarray:
        return self.states[..., 0]


def run_rng(seed: int, run: int) -> np.random.Generator:
    """Independent stream for Monte-Carlo run ``run`` under root ``seed``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(run)]))


def generate_trajectory(scenario: Scenario, rng: np.random.Generator) -> Trajectory:
    """Simulate truth and measurements from ``x_0 = 0`` with labelled noise draws."""
    sys, N = scenario.sys, scenario.horizon
    process = scenario.noise.lifted_process(sys)
    v, li = sample_mixture(process, rng, N)
    w, lj = sample_mixture(scenario.noise.measurement, rng, N)
    states = np.empty((N, sys.n_x))
    x = np.zeros(sys.n_x)
    for k in range(N):
        x = sys.F @ x + v[k]
        states[k] = x
    z = states @ sys.H.T + w
    return Trajectory(states, z, np.stack([li, lj], axis=-1))


def generate_runs(scenario: Scenario, runs: int, seed: int | None = None) -> Trajectory:
    """Stack ``runs`` trajectories, run ``r`` drawn from :func:`run_rng` ``(seed, r)``."""
    seed = scenario.seed if seed is None else seed
    trajs = [generate_trajectory(scenario, run_rng(seed, r)) for r in range(runs)]
    return Trajectory(
        np.stack([t.states for t in trajs]),
        np.stack([t.measurements for t in trajs]),
        np.stack([t.labels for t in trajs]),
    )


@dataclass(frozen=True, eq=False)
class RunRecord:
    scenario: Scenario
    label: str
    truth: np.ndarray
    measurements: np.ndarray
    labels: np.ndarray
    result: FilterRun
    rmse: float
    cep: float


def run_single(scenario: Scenario, kind, scheme=None, run: int = 0) -> RunRecord:
    traj = generate_trajectory(scenario, run_rng(scenario.seed, run))
    res = run_filter(kind, scheme, scenario.sys, scenario.noise, traj.measurements,
                     labels=traj.labels, prior=scenario.prior())
    err = res.means[:, 0] - traj.positions
    return RunRecord(scenario, filter_label(kind, scheme), traj.states, traj.measurements,
                     traj.labels, res, stats.rmse(err), stats.cep(err))


# --------------------------------------------------------------------------- Monte Carlo


@dataclass(frozen=True, eq=False)
class FilterStats:
    label: str
    rmse: np.ndarray  # per included run
    cep: np.ndarray
    n_fallback: int
    excluded: int
    estimates: np.ndarray | None = field(default=None, repr=False)  # (runs, N) positions

    @property
    def rmse_mean(self) -> float:
        return float(np.mean(self.rmse))

    @property
    def cep_mean(self) -> float:
        return float(np.mean(self.cep))

    @property
    def rmse_ci(self) -> tuple[float, float]:
        return stats.confidence_interval(self.rmse)

    @property
    def cep_ci(self) -> tuple[float, float]:
        return stats.confidence_interval(self.cep)


@dataclass(frozen=True, eq=False)
class MonteCarloResult:
    scenario: Scenario
    runs: int
    seed: int
    filters: dict[str, FilterStats]
    truth: np.ndarray = field(repr=False)  # (runs, N) true positions

    def __getitem__(self, label: str) -> FilterStats:
        return self.filters[label]

    def summary_rows(self) -> list[dict]:
        rows = []
        for label, fs in self.filters.items():
            lo, hi = fs.rmse_ci
            clo, chi = fs.cep_ci
            rows.append(dict(filter=label, rmse=fs.rmse_mean, rmse_lo=lo, rmse_hi=hi,
                             cep=fs.cep_mean, cep_lo=clo, cep_hi=chi,
                             fallback_steps=fs.n_fallback, excluded_runs=fs.excluded))
        return rows


def _filter_batch(scenario, kind, scheme, traj: Trajectory):
    """Filter every run at once; on failure retry run by run and drop the failures."""
    prior = scenario.prior()
    try:
        res = run_filter(kind, scheme, scenario.sys, scenario.noise, traj.measurements,
                         labels=traj.labels, prior=prior)
        return res.means[..., 0], res.fallback.sum(axis=-1), np.ones(len(res.means), bool)
    except FilterError as exc:
        log.warning("%s: batch failed (%s); re-running individually", filter_label(kind, scheme), exc)
    runs = traj.measurements.shape[0]
    est = np.full(traj.positions.shape, np.nan)
    fb = np.zeros(runs, dtype=int)
    ok = np.zeros(runs, dtype=bool)
    for r in range(runs):
        try:
            res = run_filter(kind, scheme, scenario.sys, scenario.noise, traj.measurements[r],
                             labels=traj.labels[r], prior=prior)
        except FilterError as exc:
            log.warning("%s run %d excluded: %s", filter_label(kind, scheme), r, exc)
            continue
        est[r], fb[r], ok[r] = res.means[:, 0], res.fallback.sum(), True
    return est, fb, ok


def monte_carlo(
    scenario: Scenario,
    filters=ALL_FILTERS,
    runs: int = 1000,
    seed: int | None = None,
    keep_estimates: bool = True,
) -> MonteCarloResult:
    """Independent seeded runs; every filter sees the same measurements in a run.

    Metrics are computed per run (RMSE/CEP over the horizon) and then
    averaged across runs.
    """
    if runs < 2:
        raise ValueError("monte_carlo needs at least two runs")
    seed = scenario.seed if seed is None else seed
    traj = generate_runs(scenario, runs, seed)
    out = {}
    for spec in filters:
        kind, scheme = parse_filter(spec) if isinstance(spec, str) else spec
        label = filter_label(kind, scheme)
        est, fb, ok = _filter_batch(scenario, kind, scheme, traj)
        excluded = int(runs - ok.sum())
        if excluded > MAX_EXCLUDED_FRACTION * runs:
            raise SweepError(f"{label}: {excluded} of {runs} runs failed")
        err = est[ok] - traj.positions[ok]
        out[label] = FilterStats(label, stats.rmse(err), stats.cep(err), int(fb.sum()),
                                 excluded, est[ok] if keep_estimates else None)
    return MonteCarloResult(scenario, runs, seed, out, traj.positions)


# --------------------------------------------------------------------------- sweeps


@dataclass(frozen=True)
class SweepPoint:
    model: int
    c: float
    kl: float
    metrics: tuple  # summary rows, one per filter
    ks_ammse_gsf: stats.TestResult | None
    ks_ammse_truth: stats.TestResult | None
    ab_ammse_gsf: stats.TestResult | None
    fallback_steps: int
    excluded_runs: int

    def row(self, label: str) -> dict:
        for r in self.metrics:
            if r["filter"] == label:
                return r
        raise KeyError(label)


@dataclass(frozen=True)
class SweepResult:
    points: tuple  # of SweepPoint, sorted by KL

    def rows(self) -> list[dict]:
        out = []
        for p in self.points:
            for r in p.metrics:
                out.append(dict(model=p.model, c=p.c, kl=p.kl, **r))
        return out

    def series(self, label: str, metric: str = "rmse") -> np.ndarray:
        return np.array([p.row(label)[metric] for p in self.points])


def _sweep_point(model, c, filters, runs, seed, kl_samples, horizon, prior_var) -> SweepPoint:
    sc = separation_scenario(model, c, horizon=horizon, seed=seed, prior_var=prior_var)
    kl = kl_to_moment_matched(sc.noise.process, kl_samples, np.random.default_rng([seed, 7919]))
    mc = monte_carlo(sc, filters, runs)
    tests = {}
    if "ammse-merge" in mc.filters and "gsf-merge" in mc.filters:
        a = mc["ammse-merge"].estimates.ravel()
        g = mc["gsf-merge"].estimates.ravel()
        tests["ks_ammse_gsf"] = stats.ks_two_sample(a, g)
        tests["ks_ammse_truth"] = stats.ks_two_sample(a, mc.truth.ravel())
        tests["ab_ammse_gsf"] = stats.ansari_bradley(a, g)
    fb = sum(f.n_fallback for f in mc.filters.values())
    ex = sum(f.excluded for f in mc.filters.values())
    return SweepPoint(model, float(c), kl, tuple(mc.summary_rows()),
                      tests.get("ks_ammse_gsf"), tests.get("ks_ammse_truth"),
                      tests.get("ab_ammse_gsf"), fb, ex)


def separation_sweep(
    model: int,
    c_grid,
    filters=ALL_FILTERS,
    runs: int = 200,
    seed: int = 0,
    kl_samples: int = KL_SAMPLES,
    horizon: int = DEFAULT_HORIZON,
    prior_var: float = DEFAULT_PRIOR_VAR,
    threads: int = 1,
) -> SweepResult:
    """Monte-Carlo metrics and KS/Ansari-Bradley tests across separations ``c``."""
    c_grid = [float(c) for c in c_grid]
    if not c_grid:
        raise ValueError("c_grid must not be empty")
    args = [(model, c, filters, runs, seed, kl_samples, horizon, prior_var) for c in c_grid]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            points = list(pool.map(_sweep_point, *zip(*args)))
    else:
        points = [_sweep_point(*a) for a in args]
    return SweepResult(tuple(sorted(points, key=lambda p: (p.kl, p.c))))


# --------------------------------------------------------------------------- limit cases


def _max_gain_gap(sys, prior, process, measurement, z) -> tuple[float, float]:
    a = bank_step("ammse", "merge", sys, prior, process, measurement, z, full=True)
    g = bank_step("gsf", "merge", sys, prior, process, measurement, z, full=True)
    gain_gap = float(np.max(np.abs(a.gains - g.gains)))
    est_gap = float(np.max(np.abs(a.estimate.mean - g.estimate.mean)))
    return gain_gap, est_gap


def innovation_spread(sys, prior, process, measurement, z) -> float:
    xp, Pp = bank_predict(sys, prior, process)
    nu = bank_innovations(sys, xp, Pp, measurement, z).nu
    d = nu[:, None, :] - nu[None, :, :]
    return float(np.max(np.linalg.norm(d, axis=-1)))


def coincidence_ladder(
    model: int = 1,
    deltas=(1.0, 1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 1e-6, 0.0),
    z: float = 0.7,
    prior: GaussianEstimate | None = None,
) -> list[dict]:
    """Gain gap between AMMSE and GSF as all innovations are pulled together.

    The model's component means are rescaled so the largest pairwise
    distance between hypothesis innovations equals ``delta`` exactly.
    """
    sys = LinearSystem.constant_velocity()
    prior = prior or GaussianEstimate(np.array([0.3, -0.2]), np.array([[0.5, 0.1], [0.1, 2.0]]))
    base = separation_scenario(model, 1.0).noise
    unit_proc = base.lifted_process(sys)
    spread = innovation_spread(sys, prior, unit_proc, base.measurement, z)
    rows = []
    for delta in deltas:
        s = delta / spread
        proc = GaussianMixture(base.process.weights, s * base.process.means, base.process.covs)
        meas = GaussianMixture(base.measurement.weights, s * base.measurement.means,
                               base.measurement.covs)
        lifted = NoiseModel(proc, meas).lifted_process(sys)
        gain_gap, est_gap = _max_gain_gap(sys, prior, lifted, meas, z)
        rows.append(dict(case="a", delta=float(delta), gain_gap=gain_gap, estimate_gap=est_gap))
    return rows


def min_separation_sigmas(scenario: Scenario, prior: GaussianEstimate) -> float:
    """Smallest distance between hypothesis innovation means, in innovation std units."""
    sys = scenario.sys
    process = scenario.noise.lifted_process(sys)
    xp, Pp = bank_predict(sys, prior, process)
    innov = bank_innovations(sys, xp, Pp, scenario.noise.measurement, np.zeros(sys.n_z))
    centers = innov.nu
    d = np.linalg.norm(centers[:, None, :] - centers[None, :, :], axis=-1)
    d[np.diag_indices_from(d)] = np.inf
    sigma = np.sqrt(np.max(np.linalg.eigvalsh(innov.S)))
    return float(np.min(d) / sigma)


def separation_ladder(
    model: int = 1,
    c_grid=(2.0, 5.0, 10.0, 20.0, 50.0),
    horizon: int = 200,
    seed: int = 3,
) -> list[dict]:
    """Distance of GSF/AMMSE reduced estimates from the matched filter as separation grows.

    Each rung filters one shared trajectory; gaps are maxima over steps.
    """
    rows = []
    for c in c_grid:
        sc = separation_scenario(model, c, horizon=horizon, seed=seed)
        traj = generate_trajectory(sc, run_rng(seed, 0))
        prior = sc.prior()
        matched = run_filter("matched", None, sc.sys, sc.noise, traj.measurements,
                             labels=traj.labels, prior=prior)
        row = dict(case="b", c=float(c), separation_sigma=np.nan)
        steady = GaussianEstimate(matched.means[-1], matched.covs[-1])
        row["separation_sigma"] = min_separation_sigmas(sc, steady)
        for kind in ("gsf", "ammse"):
            for scheme in ("merge", "remove"):
                res = run_filter(kind, scheme, sc.sys, sc.noise, traj.measurements, prior=prior)
                gap = float(np.max(np.abs(res.means - matched.means)))
                row[f"gap_{kind}_{scheme}"] = gap
                if scheme == "merge":
                    row[f"min_max_mu_{kind}"] = float(np.min(res.max_mu))
        row["min_max_mu"] = min(row["min_max_mu_gsf"], row["min_max_mu_ammse"])
        rows.append(row)
    return rows


def convergence_probe(model: int = 1, deltas=None, c_grid=None) -> dict[str, list[dict]]:
    """Both limit-case ladders: coinciding innovations and diverging innovations."""
    a = coincidence_ladder(model, **({"deltas": deltas} if deltas is not None else {}))
    b = separation_ladder(model, **({"c_grid": c_grid} if c_grid is not None else {}))
    return {"a": a, "b": b}


# --------------------------------------------------------------------------- complexity


VARIANTS = (("gsf", "merge"), ("gsf", "remove"), ("ammse", "merge"), ("ammse", "remove"))


def _bench_inputs(n_proc, n_meas, n_x, n_z, batch, rng):
    """Random predicted bank, innovations and weights for ``batch`` independent steps."""
    sys = LinearSystem(np.eye(n_x) + 0.1 * np.eye(n_x, k=1), np.eye(n_z, n_x))
    proc_means = rng.normal(size=(n_proc, n_x))
    proc_covs = np.stack([np.eye(n_x) * (1 + i) for i in range(n_proc)])
    meas = GaussianMixture(np.full(n_meas, 1 / n_meas), rng.normal(size=(n_meas, n_z)),
                           np.stack([np.eye(n_z) * (1 + j) for j in range(n_meas)]))
    proc = GaussianMixture(np.full(n_proc, 1 / n_proc), proc_means, proc_covs)
    L = rng.normal(size=(batch, n_x, n_x))
    prior = GaussianEstimate(rng.normal(size=(batch, n_x)), L @ np.swapaxes(L, -1, -2) + np.eye(n_x))
    z = rng.normal(size=(batch, n_z))
    xp, Pp = bank_predict(sys, prior, proc)
    innov = bank_innovations(sys, xp, Pp, meas, z)
    mu = update_mode_probabilities(proc.weights, meas.weights, innov.loglik)
    idx = innov.proc_idx
    return sys, xp[..., idx, :], Pp[..., idx, :, :], innov, mu, proc.means[idx]


def _fit(k: np.ndarray, t: np.ndarray) -> dict:
    slope, intercept = np.polyfit(k, t, 1)
    resid = t - (slope * k + intercept)
    ss_tot = np.sum((t - t.mean()) ** 2)
    r2 = 1.0 - np.sum(resid**2) / ss_tot if ss_tot > 0 else 1.0
    exponent = np.polyfit(np.log(k), np.log(t), 1)[0] if np.ptp(k) > 0 else 0.0
    return dict(slope=float(slope), intercept=float(intercept), r2=float(r2), exponent=float(exponent))


def complexity_bench(
    bank_sizes=((1, 1), (2, 2), (3, 3), (5, 5)),
    dims: tuple[int, int] = (2, 1),
    batch: int = 4096,
    repeats: int = 15,
    seed: int = 0,
) -> dict:
    """Median wall time of the update stage (gains, posteriors, reduction) per variant.

    Prediction, innovations and weights are precomputed and excluded. The
    steps are batched so the per-hypothesis arithmetic, rather than Python
    overhead, dominates the timing.
    """
    n_x, n_z = dims
    rng = np.random.default_rng(seed)
    rows = []
    for n_proc, n_meas in bank_sizes:
        if n_proc < 1 or n_meas < 1:
            raise ValueError("bank sizes must be positive")
        sys, xp_h, Pp_h, innov, mu, u_h = _bench_inputs(n_proc, n_meas, n_x, n_z, batch, rng)
        for kind, scheme in VARIANTS:
            update_stage(kind, scheme, sys, xp_h, Pp_h, innov, mu, u_h, on_singular="fallback")
            times = []
            for _ in range(repeats):
                t0 = time.perf_counter()
                update_stage(kind, scheme, sys, xp_h, Pp_h, innov, mu, u_h, on_singular="fallback")
                times.append(time.perf_counter() - t0)
            rows.append(dict(n_proc=n_proc, n_meas=n_meas, bank=n_proc * n_meas,
                             filter=f"{kind}-{scheme}", seconds=float(np.median(times))))
    fits = {}
    for kind, scheme in VARIANTS:
        label = f"{kind}-{scheme}"
        sel = [r for r in rows if r["filter"] == label]
        k = np.array([r["bank"] for r in sel], dtype=float)
        t = np.array([r["seconds"] for r in sel])
        fits[label] = _fit(k, t)
    return {"rows": rows, "fits": fits}
