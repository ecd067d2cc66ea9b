"""Ensemble statistics: moment plateaus, stopping-time moments, coupled
equicontinuity probes, small-ball hitting counts, and long-run averages.

Trajectory batches share the clock grid, so the whole ensemble advances as
(B, n, n) coefficient arrays through the same vectorized spectral kernels the
single-path stepper uses; per-path randomness enters only through the clock
increments and the Brownian draws, each from its own keyed stream.
"""

from __future__ import annotations

import hashlib
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from functools import partial

import numpy as np
from scipy.stats import beta as beta_dist

from . import spectral as sp
from .noise import (
    ROLE_BROWNIAN,
    ROLE_CLOCK,
    ROLE_SCRATCH,
    NoiseModel,
    SubordinatorSpec,
    exp_moment_eta,
    rng_stream,
    sample_subordinator,
    subordinated_increments,
)
from .spectral import PhysicsParams, SpectralState
from .stepping import NORM_CEILING, Stepper


def parallel_map(fun, items):
    """Map over items, forking workers when BQLAB_WORKERS asks for them."""
    items = list(items)
    workers = int(os.environ.get("BQLAB_WORKERS", "1"))
    if workers <= 1 or len(items) <= 1:
        return [fun(x) for x in items]
    with ProcessPoolExecutor(max_workers=min(workers, len(items))) as pool:
        return list(pool.map(fun, items))


# ---------------------------------------------------------------------------
# observables


@dataclass(frozen=True)
class Observable:
    """Named scalar functional of the state."""

    name: str
    fun: object

    def __call__(self, state: SpectralState, params: PhysicsParams) -> float:
        return self.fun(state, params)


def _energy_sq(state, params):
    return sp.weighted_norm(state, params) ** 2


def _squashed_energy(state, params):
    x = sp.weighted_norm(state, params)
    return x / (1.0 + x)


def _squashed_mode(state, params, k, m, slot):
    f_hat = state.theta_hat if slot == "theta" else state.w_hat
    c = sp.mode_coeff(f_hat, k, m)
    return c / (1.0 + abs(c))


def energy_sq_observable() -> Observable:
    return Observable("energy_sq", _energy_sq)


def squashed_energy_observable() -> Observable:
    """||U|| / (1 + ||U||): bounded, 1-Lipschitz in the weighted norm."""
    return Observable("bl_energy", _squashed_energy)


def squashed_mode_observable(k, m: int, slot: str = "theta") -> Observable:
    """c / (1 + |c|) of one trig coefficient: bounded and Lipschitz."""
    name = f"bl_{slot}_{k[0]}_{k[1]}_{'cos' if m == 0 else 'sin'}"
    return Observable(name, partial(_squashed_mode, k=tuple(k), m=m, slot=slot))


def default_observables() -> tuple:
    """Three bounded Lipschitz functionals: global, forced mode, mixed mode."""
    return (squashed_energy_observable(),
            squashed_mode_observable((1, 0), 0, "theta"),
            squashed_mode_observable((1, 1), 1, "w"))


# ---------------------------------------------------------------------------
# shared-noise batches


def sample_noise_batch(spec: SubordinatorSpec, model: NoiseModel, horizon: float,
                       seed: int, n_paths: int, key_offset: int = 0):
    """Clock paths and subordinated Brownian increments for a batch.

    Every path gets its own clock and Brownian stream keyed by (seed, role,
    path index); the shared horizon and grid step mean all paths have the
    same cell count, which is what lets the batch advance in lockstep.
    Returns (increments (B, cells), dw (B, cells, d)).
    """
    incs, dws = [], []
    for i in range(n_paths):
        path = sample_subordinator(spec, horizon,
                                   rng_stream(seed, ROLE_CLOCK, key_offset + i))
        dw = subordinated_increments(path, model.dim,
                                     rng_stream(seed, ROLE_BROWNIAN, key_offset + i))
        incs.append(path.increments)
        dws.append(dw)
    return np.stack(incs), np.stack(dws)


def noise_digest(increments: np.ndarray, dw: np.ndarray) -> str:
    """Fingerprint of a noise batch, for asserting two runs share it."""
    h = hashlib.sha256()
    h.update(np.ascontiguousarray(increments).tobytes())
    h.update(np.ascontiguousarray(dw).tobytes())
    return h.hexdigest()


@dataclass
class BatchTrajectory:
    times: np.ndarray        # (n_rec,)
    energy_sq: np.ndarray    # (B, n_rec) weighted norm squared
    observed: np.ndarray     # (n_obs, B, n_rec)
    w_hat: np.ndarray        # final coefficients (B, n, n)
    theta_hat: np.ndarray

    def final_state(self, b: int) -> SpectralState:
        return SpectralState(self.w_hat[b], self.theta_hat[b])


class BatchRunner:
    """Lockstep integrator for a batch of trajectories with shared grids."""

    def __init__(self, stepper: Stepper, model: NoiseModel):
        self.stepper = stepper
        self.model = model
        self.basis = model.theta_basis(stepper.n)
        self.k1 = sp.wavenumbers(stepper.n)[0]

    def explicit(self, w, t):
        u1, u2 = sp._velocity_physical(w)
        nw = self.stepper.params.g * (1j * self.k1) * t - sp._advect(u1, u2, w)
        return nw, -sp._advect(u1, u2, t)

    def advance(self, w, t):
        st = self.stepper
        nw, nt = self.explicit(w, t)
        return st.decay_w * w + st.gain_w * nw, st.decay_t * t + st.gain_t * nt

    def run(self, w, t, dw, grid_step: float, record_every: int = 1,
            observables=()) -> BatchTrajectory:
        """Advance the batch across all cells, kicking after each cell's steps.

        dw has shape (B, cells, d); the step size must divide the clock grid
        step, and jumps are applied at the right endpoint of their cell,
        after the deterministic substep, exactly as the single-path loop
        does it.
        """
        st = self.stepper
        w = np.array(w, dtype=np.complex128, copy=True)
        t = np.array(t, dtype=np.complex128, copy=True)
        n_b, cells = dw.shape[0], dw.shape[1]
        q = grid_step / st.dt
        qi = int(round(q))
        if abs(q - qi) > 1e-9 * max(1.0, q) or qi < 1:
            raise ValueError("step size must divide the clock grid step")
        kicks = {(i + 1) * qi - 1: i for i in range(cells)}
        n_steps = cells * qi
        if n_steps % record_every:
            raise ValueError("record_every must divide the step count")
        n_rec = n_steps // record_every + 1
        params = st.params
        zeta = params.zeta_star
        scale = (2.0 * np.pi) ** 2 / float(st.n) ** 4

        energy = np.empty((n_b, n_rec))
        observed = np.empty((len(observables), n_b, n_rec))
        times = st.dt * record_every * np.arange(n_rec)

        def record(slot):
            energy[:, slot] = scale * (
                zeta * (np.abs(w.reshape(n_b, -1)) ** 2).sum(1)
                + (np.abs(t.reshape(n_b, -1)) ** 2).sum(1))
            for oi, obs in enumerate(observables):
                for b in range(n_b):
                    observed[oi, b, slot] = obs(SpectralState(w[b], t[b]), params)

        record(0)
        for step in range(n_steps):
            w, t = self.advance(w, t)
            cell = kicks.get(step)
            if cell is not None:
                t = t + np.einsum("bd,dxy->bxy", dw[:, cell], self.basis)
            if (step + 1) % record_every == 0:
                slot = (step + 1) // record_every
                record(slot)
                if not np.isfinite(energy[:, slot]).all() or \
                        energy[:, slot].max() > NORM_CEILING**2:
                    raise RuntimeError(f"batch blow-up at step {step + 1}")
        return BatchTrajectory(times, energy, observed, w, t)


def _tile(state: SpectralState, n_paths: int):
    w = np.repeat(state.w_hat[None], n_paths, axis=0)
    t = np.repeat(state.theta_hat[None], n_paths, axis=0)
    return w, t


# ---------------------------------------------------------------------------
# second-moment plateau


@dataclass
class MomentCurve:
    times: np.ndarray
    energy_sq: np.ndarray    # (n_paths, n_rec)

    def mean_curve(self) -> np.ndarray:
        return self.energy_sq.mean(axis=0)

    def plateau(self, tail_frac: float = 0.5):
        """Fitted plateau constant and its Monte Carlo standard error.

        Averages each path over the trailing fraction of the window first,
        so the error bar reflects independent paths, not correlated times.
        """
        start = int(round((1.0 - tail_frac) * (len(self.times) - 1)))
        per_path = self.energy_sq[:, start:].mean(axis=1)
        n_b = len(per_path)
        return float(per_path.mean()), float(per_path.std(ddof=1) / np.sqrt(n_b))


def moment_experiment(seed: int, n_paths: int, horizon: float, stepper: Stepper,
                      model: NoiseModel, spec: SubordinatorSpec,
                      initial: SpectralState, record_every: int = 10,
                      key_offset: int = 0) -> MomentCurve:
    """Ensemble of trajectories from one initial state; records energy."""
    incs, dw = sample_noise_batch(spec, model, horizon, seed, n_paths, key_offset)
    runner = BatchRunner(stepper, model)
    w, t = _tile(initial, n_paths)
    out = runner.run(w, t, dw, spec.grid_step, record_every)
    return MomentCurve(out.times, out.energy_sq)


def plateau_agreement(curves) -> float:
    """Worst pairwise plateau gap in combined standard errors."""
    fits = [c.plateau() for c in curves]
    worst = 0.0
    for i in range(len(fits)):
        for j in range(i + 1, len(fits)):
            gap = abs(fits[i][0] - fits[j][0])
            se = np.hypot(fits[i][1], fits[j][1])
            worst = max(worst, gap / max(se, 1e-300))
    return worst


# ---------------------------------------------------------------------------
# exponential moments of the recurrence times


def clock_rate_function(spec: SubordinatorSpec, c: float) -> float:
    """Large-deviation cost of the clock sustaining mean rate c.

    For the gamma family the Legendre transform of the increment log-MGF at
    rate c >= a/b is b c - a - a log(b c / a); below the mean rate the cost
    of staying high is zero.
    """
    if spec.family != "gamma":
        raise ValueError(f"no rate function for family {spec.family!r}")
    if spec.a == 0.0:
        return np.inf
    if c <= spec.a / spec.b:
        return 0.0
    return float(spec.b * c - spec.a - spec.a * np.log(spec.b * c / spec.a))


@dataclass
class StoppingMomentReport:
    estimate: float
    stderr: float
    n_paths: int
    censored: int
    doubled_estimate: float
    doubled_stderr: float
    doubling_gap: float       # relative change when the path count doubles
    tail_margin: float        # rate-function cost over the moment growth rate
    heavy_tail: bool


def stopping_moment_experiment(spec: SubordinatorSpec, nu: float, kappa: float,
                               b0: float, seed: int, n_paths: int,
                               horizon: float | None = None) -> StoppingMomentReport:
    """Monte Carlo E exp(10 nu eta_1) with a doubling check and a tail flag.

    The estimate is trustworthy only when the exponential growth rate 10 nu
    is well below the large-deviation cost of the clock outrunning the drift,
    i.e. when the clock would have to sustain rate nu / (8 b0 kappa) to keep
    eta large; margins under 2 are flagged as heavy-tailed.
    """
    first = exp_moment_eta(spec, nu, kappa, b0, n_paths, seed, horizon)
    second = exp_moment_eta(spec, nu, kappa, b0, 2 * n_paths, seed + 1, horizon)
    gap = abs(second["estimate"] - first["estimate"]) / max(first["estimate"], 1e-300)
    if kappa == 0.0:
        margin = np.inf
    else:
        cost = clock_rate_function(spec, nu / (8.0 * b0 * kappa))
        margin = cost / (10.0 * nu)
    return StoppingMomentReport(
        estimate=first["estimate"], stderr=first["stderr"],
        n_paths=n_paths, censored=first["censored"],
        doubled_estimate=second["estimate"], doubled_stderr=second["stderr"],
        doubling_gap=gap, tail_margin=float(margin), heavy_tail=bool(margin < 2.0))


# ---------------------------------------------------------------------------
# coupled equicontinuity probe


@dataclass
class EPropertyReport:
    deltas: tuple
    gaps: np.ndarray          # (n_deltas, n_obs) |mean coupled difference|
    sup_gaps: np.ndarray      # (n_deltas,) max over observables
    state_gaps: np.ndarray    # (n_deltas,) mean terminal weighted distance
    slope: float              # log-log response of sup gap to delta
    digest: str
    coupled: bool             # every run saw the identical noise batch


def eproperty_probe(seed: int, stepper: Stepper, model: NoiseModel,
                    spec: SubordinatorSpec, base_state: SpectralState,
                    horizon: float, n_paths: int,
                    deltas=(1e-1, 5e-2, 2.5e-2), observables=None,
                    record_every: int = 10) -> EPropertyReport:
    """Same-noise response of time-T statistics to initial perturbations.

    Each delta reruns the identical noise batch (checked by digest) from the
    base state shifted by delta times a fixed unit direction; the feedback
    statistic is the coupled mean difference of each observable at time T.
    """
    if observables is None:
        observables = default_observables()
    direction = sp.random_state(stepper.n, rng_stream(seed, ROLE_SCRATCH), amplitude=1.0)
    direction = direction * (1.0 / sp.weighted_norm(direction, stepper.params))
    runner = BatchRunner(stepper, model)

    def run_from(state: SpectralState):
        incs, dw = sample_noise_batch(spec, model, horizon, seed, n_paths)
        digest = noise_digest(incs, dw)
        w, t = _tile(state, n_paths)
        out = runner.run(w, t, dw, spec.grid_step, record_every, observables)
        return out, digest

    base_out, digest0 = run_from(base_state)
    gaps, state_gaps, digests = [], [], [digest0]
    params = stepper.params
    zeta = params.zeta_star
    scale = (2.0 * np.pi) ** 2 / float(stepper.n) ** 4
    for delta in deltas:
        out, digest = run_from(base_state + direction * delta)
        digests.append(digest)
        diff = out.observed[:, :, -1] - base_out.observed[:, :, -1]
        gaps.append(np.abs(diff.mean(axis=1)))
        dw_hat = out.w_hat - base_out.w_hat
        dt_hat = out.theta_hat - base_out.theta_hat
        dist_sq = scale * (zeta * (np.abs(dw_hat.reshape(n_paths, -1)) ** 2).sum(1)
                           + (np.abs(dt_hat.reshape(n_paths, -1)) ** 2).sum(1))
        state_gaps.append(float(np.sqrt(dist_sq).mean()))
    gaps = np.array(gaps)
    sup_gaps = gaps.max(axis=1)
    coupled = all(d == digest0 for d in digests)
    if np.all(sup_gaps > 0):
        slope = float(np.polyfit(np.log(np.asarray(deltas)), np.log(sup_gaps), 1)[0])
    else:
        slope = np.inf
    return EPropertyReport(deltas=tuple(deltas), gaps=gaps, sup_gaps=sup_gaps,
                           state_gaps=np.array(state_gaps), slope=slope,
                           digest=digest0, coupled=coupled)


# ---------------------------------------------------------------------------
# small-ball hitting


@dataclass
class HittingEstimate:
    start: tuple              # mesh coordinates (vorticity weight, temperature weight)
    start_norm: float
    hits: int
    n_paths: int
    lower_bound: float        # one-sided Clopper-Pearson at the report confidence


@dataclass
class IrreducibilityReport:
    radius: float
    horizon: float
    confidence: float
    estimates: list
    all_positive: bool


def irreducibility_probe(seed: int, stepper: Stepper, model: NoiseModel,
                         spec: SubordinatorSpec, horizon: float, n_paths: int,
                         radius: float, mesh_scale: float,
                         confidence: float = 0.95) -> IrreducibilityReport:
    """Hitting counts for the small ball from a mesh of initial states.

    Starts live on the 3 x 3 grid {-s, 0, s}^2 (corners included) of a fixed
    two-dimensional section: one normalized vorticity element against one
    normalized temperature element. Each start runs n_paths independent
    trajectories and reports a one-sided binomial lower confidence bound for
    the terminal event ||U_T|| <= radius.
    """
    n = stepper.n
    e_w = sp.psi_state(n, (1, 1), 0)
    e_w = e_w * (1.0 / sp.weighted_norm(e_w, stepper.params))
    e_t = sp.sigma_state(n, (1, 0), 0)
    e_t = e_t * (1.0 / sp.weighted_norm(e_t, stepper.params))
    levels = (-mesh_scale, 0.0, mesh_scale)
    starts = [(a, b) for a in levels for b in levels]

    runner = BatchRunner(stepper, model)
    qi = int(round(spec.grid_step / stepper.dt))
    blocks_w, blocks_t, blocks_dw, norms = [], [], [], []
    for si, (a, b) in enumerate(starts):
        u0 = e_w * a + e_t * b
        norms.append(float(sp.weighted_norm(u0, stepper.params)))
        incs, dw = sample_noise_batch(spec, model, horizon, seed, n_paths,
                                      key_offset=si * n_paths)
        w, t = _tile(u0, n_paths)
        blocks_w.append(w)
        blocks_t.append(t)
        blocks_dw.append(dw)
    dw = np.concatenate(blocks_dw)
    out = runner.run(np.concatenate(blocks_w), np.concatenate(blocks_t), dw,
                     spec.grid_step, record_every=dw.shape[1] * qi)
    estimates = []
    for si, (a, b) in enumerate(starts):
        final = out.energy_sq[si * n_paths:(si + 1) * n_paths, -1]
        hits = int((final <= radius * radius).sum())
        if hits > 0:
            lower = float(beta_dist.ppf(1.0 - confidence, hits, n_paths - hits + 1))
        else:
            lower = 0.0
        estimates.append(HittingEstimate(
            start=(a, b), start_norm=norms[si],
            hits=hits, n_paths=n_paths, lower_bound=lower))
    return IrreducibilityReport(
        radius=radius, horizon=horizon, confidence=confidence,
        estimates=estimates, all_positive=all(e.lower_bound > 0 for e in estimates))


# ---------------------------------------------------------------------------
# long-run stationary averages


def batch_means(series: np.ndarray, n_batches: int):
    """Batch means of a scalar series, trimming the head remainder."""
    series = np.asarray(series, dtype=float)
    m = len(series) // n_batches
    if m < 1:
        raise ValueError(f"series of {len(series)} too short for {n_batches} batches")
    return series[len(series) - m * n_batches:].reshape(n_batches, m).mean(axis=1)


def lag1_correlation(values: np.ndarray) -> float:
    v = np.asarray(values, dtype=float)
    v = v - v.mean()
    denom = float((v * v).sum())
    if denom == 0.0:
        return 0.0
    return float((v[:-1] * v[1:]).sum() / denom)


@dataclass
class StationaryEstimate:
    observable: str
    mean: float
    stderr: float             # AR(1)-inflated when the batch means correlate
    n_batches: int
    lag1: float
    short_batches: bool       # batch means still serially correlated


@dataclass
class InvariantReport:
    estimates: list           # per initial state, list of StationaryEstimate
    max_gap_sigmas: float     # worst cross-initial gap in combined errors
    agree: bool


def _run_stationary(args):
    (idx, u0, seed, horizon, stepper, model, spec, observables,
     burn_frac, n_batches, record_every) = args
    incs, dw = sample_noise_batch(spec, model, horizon, seed, 1, key_offset=idx)
    runner = BatchRunner(stepper, model)
    w, t = _tile(u0, 1)
    out = runner.run(w, t, dw, spec.grid_step, record_every, observables)
    burn = int(round(burn_frac * (out.observed.shape[-1] - 1)))
    rows = []
    for oi, obs in enumerate(observables):
        series = out.observed[oi, 0, burn:]
        bm = batch_means(series, n_batches)
        rho = lag1_correlation(bm)
        se = float(bm.std(ddof=1) / np.sqrt(n_batches))
        if rho > 0.0:
            # residual batch correlation makes the naive error optimistic;
            # the AR(1) variance factor (1+rho)/(1-rho) is the usual repair
            se *= float(np.sqrt((1.0 + rho) / (1.0 - min(rho, 0.95))))
        rows.append(StationaryEstimate(
            observable=obs.name, mean=float(bm.mean()), stderr=se,
            n_batches=n_batches, lag1=rho, short_batches=bool(rho > 0.3)))
    return rows


def invariant_statistics(seed: int, initials, horizon: float, stepper: Stepper,
                         model: NoiseModel, spec: SubordinatorSpec,
                         observables=None, burn_frac: float = 0.2,
                         n_batches: int = 20,
                         record_every: int = 10) -> InvariantReport:
    """Time averages of bounded observables from several initial states.

    One long trajectory per initial state; the first burn_frac of records is
    discarded, the rest feeds batch means. Initial-state independence of the
    invariant measure shows up as pairwise agreement within combined batch
    errors.
    """
    if observables is None:
        observables = default_observables()
    jobs = [(idx, u0, seed, horizon, stepper, model, spec, tuple(observables),
             burn_frac, n_batches, record_every)
            for idx, u0 in enumerate(initials)]
    estimates = parallel_map(_run_stationary, jobs)
    worst = 0.0
    for oi in range(len(observables)):
        for i in range(len(estimates)):
            for j in range(i + 1, len(estimates)):
                a, b = estimates[i][oi], estimates[j][oi]
                se = float(np.hypot(a.stderr, b.stderr))
                worst = max(worst, abs(a.mean - b.mean) / max(se, 1e-300))
    return InvariantReport(estimates=estimates, max_gap_sigmas=worst,
                           agree=bool(worst <= 3.0))
