"""Closed-loop simulation harness and Monte Carlo sweeps.

Rolls the plant forward under true-state feedback while three estimators
run in lockstep from the same measurement stream: the fixed-gain filter,
the weighted least-squares fusion of the local bank, and the secure
(l1-regularized) fusion.  Sparse sensor attacks are injected additively
on a fixed support.  Sweep helpers aggregate per-trial mean squared
errors over a grid of regularization weights or attack magnitudes and
write the results as CSV; every run is reproducible from (seed, trial).
"""

from __future__ import annotations

import concurrent.futures
import dataclasses
import math
import os

import numpy as np

from .decomposition import SensorDecomposition
from .fusion import (FusionProblem, assemble_canonical_measurement,
                     build_fusion_problem, initial_bank, local_estimator_step,
                     secure_fuse, trial_generators)
from .model import SystemModel, psd_factor
from .spectral import SpectralDesign, fixed_gain_kalman_step

ATTACK_KINDS = ("none", "constant", "uniform", "ramp")
DEFAULT_HORIZON = 1000
DEFAULT_BURN_IN = 50
DEFAULT_TRIALS = 20
DEFAULT_GAMMAS = (0.05, 0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0)
DEFAULT_MAGNITUDES = (0.0, 0.2, 0.4, 0.6, 0.8, 1.0, 1.2, 1.4, 1.6, 1.8, 2.0)


@dataclasses.dataclass(frozen=True)
class AttackSpec:
    """Additive sensor attack with a fixed support.

    support lists the attacked sensor indices (0-based).  kind selects
    the waveform injected on every supported sensor from start_step on:

      none      nothing (support must be empty)
      constant  magnitude at every active step
      uniform   i.i.d. draws from the open interval (-magnitude, magnitude)
      ramp      magnitude * (k - start_step), growing by magnitude per step

    Steps are counted from k = 1 (the first measurement); start_step = 0
    means the attack is active from the beginning.
    """

    support: tuple[int, ...] = ()
    kind: str = "none"
    magnitude: float = 0.0
    start_step: int = 0

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}; "
                             f"expected one of {ATTACK_KINDS}")
        support = tuple(sorted({int(i) for i in self.support}))
        if any(i < 0 for i in support):
            raise ValueError(f"attack support contains a negative sensor "
                             f"index: {support}")
        if self.kind == "none" and support:
            raise ValueError("attack kind 'none' cannot have a support")
        if self.kind != "none" and not support:
            raise ValueError(f"attack kind {self.kind!r} needs a non-empty "
                             f"support")
        if not math.isfinite(self.magnitude):
            raise ValueError("attack magnitude must be finite")
        if self.kind == "uniform" and self.magnitude < 0:
            raise ValueError("uniform attack magnitude must be nonnegative")
        if self.start_step < 0:
            raise ValueError("attack start_step must be nonnegative")
        object.__setattr__(self, "support", support)
        object.__setattr__(self, "magnitude", float(self.magnitude))
        object.__setattr__(self, "start_step", int(self.start_step))

    @property
    def p(self) -> int:
        """Number of attacked sensors."""
        return len(self.support)


def attack_sequence(attack: AttackSpec, m: int, horizon: int,
                    rng: np.random.Generator) -> np.ndarray:
    """Materialize a(k) for k = 1..horizon as a (horizon, m) array.

    Every row's support stays inside attack.support, and for a nonzero
    waveform every supported sensor is hit at least once over the run.
    """
    if any(i >= m for i in attack.support):
        bad = [i for i in attack.support if i >= m]
        raise ValueError(f"attack support {bad} out of range for {m} sensors")
    a = np.zeros((horizon, m))
    if attack.kind == "none" or not attack.support:
        return a
    k = np.arange(1, horizon + 1)
    active = k >= attack.start_step
    mag = attack.magnitude
    cols = list(attack.support)
    if attack.kind == "constant":
        a[np.ix_(active, cols)] = mag
    elif attack.kind == "ramp":
        ramp = mag * (k - attack.start_step)
        a[:, cols] = np.where(active, ramp, 0.0)[:, None]
    elif attack.kind == "uniform":
        if mag > 0:
            draws = rng.uniform(-mag, mag, size=(int(active.sum()), len(cols)))
            # numpy's uniform is closed at the low end; redraw the
            # measure-zero hits so the interval stays open
            low = draws <= -mag
            while low.any():
                draws[low] = rng.uniform(-mag, mag, size=int(low.sum()))
                low = draws <= -mag
            a[np.ix_(active, cols)] = draws
    off = [i for i in range(m) if i not in attack.support]
    assert not a[:, off].any()
    if mag != 0 and horizon >= max(attack.start_step, 1):
        assert all(a[:, i].any() for i in cols)
    return a


@dataclasses.dataclass(frozen=True)
class SimulationTrace:
    """Per-step record of one closed-loop run.

    Row t corresponds to step k = t + 1: x holds the true state after
    the transition, u the input that drove it, z the clean measurement,
    a the injected attack, and y = z + a what the estimators saw.  The
    solver columns describe the secure fusion at that step.
    """

    seed: int
    trial: int
    gamma: float
    horizon: int
    attack: AttackSpec
    x: np.ndarray
    u: np.ndarray
    z: np.ndarray
    y: np.ndarray
    a: np.ndarray
    xhat_kal: np.ndarray
    xhat_sec: np.ndarray
    xhat_ls: np.ndarray
    solver_iters: np.ndarray
    kkt_residual: np.ndarray
    solver_converged: np.ndarray
    kalman_equivalent: np.ndarray

    @property
    def unconverged_steps(self) -> int:
        return int((~self.solver_converged).sum())


def simulate(model: SystemModel, design: SpectralDesign,
             decomposition: SensorDecomposition, attack: AttackSpec,
             gamma: float, horizon: int = DEFAULT_HORIZON, seed: int = 0, *,
             trial: int = 0, x0=None,
             problem: FusionProblem | None = None) -> SimulationTrace:
    """Run the plant and all three estimators for `horizon` steps.

    The input is true-state feedback u(k) = -K_lqr x(k); estimators never
    close the loop.  All randomness (initial state, process noise,
    measurement noise, attack draws) comes from independent substreams
    of (seed, trial), so two runs that differ only in the attack share
    the same noise and the same clean measurements.  Passing x0 pins the
    initial state instead of drawing it.  Solver non-convergence at a
    step is recorded in the trace and the run continues.
    """
    if horizon < 1:
        raise ValueError(f"horizon must be at least 1, got {horizon}")
    if gamma <= 0:
        raise ValueError("γ = 0 leaves x̃ non-identifiable")
    n, m = model.n, model.m
    A, C = model.A, model.C
    B = model.input_matrix()
    K = model.feedback_gain()

    g_init, g_proc, g_meas, g_att = trial_generators(seed, trial)
    Lq = psd_factor(model.Q)
    Lr = psd_factor(model.R)
    if x0 is None:
        x = psd_factor(model.Sigma) @ g_init.standard_normal(n)
    else:
        x = np.asarray(x0, dtype=float).reshape(-1)
        if x.shape[0] != n:
            raise ValueError(f"x0 has length {x.shape[0]}, expected {n}")
        x = x.copy()
    w = g_proc.standard_normal((horizon, n))
    v = g_meas.standard_normal((horizon, m))
    a = attack_sequence(attack, m, horizon, g_att)

    if problem is None:
        problem = build_fusion_problem(decomposition.H_stack,
                                       decomposition.Mtilde_factor)
    bank = initial_bank(model)
    x_kal = np.zeros(n)
    warm = None

    xs = np.empty((horizon, n))
    us = np.empty((horizon, B.shape[1]))
    zs = np.empty((horizon, m))
    ys = np.empty((horizon, m))
    kals = np.empty((horizon, n))
    secs = np.empty((horizon, n))
    lss = np.empty((horizon, n))
    iters = np.empty(horizon, dtype=int)
    kkts = np.empty(horizon)
    convs = np.empty(horizon, dtype=bool)
    equivs = np.empty(horizon, dtype=bool)

    for t in range(horizon):
        u = -(K @ x)
        x = A @ x + B @ u + Lq @ w[t]
        z = C @ x + Lr @ v[t]
        y = z + a[t]
        x_kal = fixed_gain_kalman_step(x_kal, y, u, design, model)
        bank = local_estimator_step(bank, y, u, decomposition, model)
        Y = assemble_canonical_measurement(bank, decomposition)
        res = secure_fuse(Y, decomposition.H_stack,
                          decomposition.Mtilde_factor, gamma,
                          warm_start=warm, problem=problem)
        warm = (res.x_tilde, res.nu)
        xs[t], us[t], zs[t], ys[t] = x, u, z, y
        kals[t], secs[t], lss[t] = x_kal, res.x_tilde, res.x_ls
        iters[t] = res.iterations
        kkts[t] = res.kkt_residual
        convs[t] = res.converged
        equivs[t] = res.kalman_equivalent

    for arr in (xs, us, zs, ys, a, kals, secs, lss, kkts):
        assert np.isfinite(arr).all()
    return SimulationTrace(
        seed=int(seed), trial=int(trial), gamma=float(gamma),
        horizon=int(horizon), attack=attack, x=xs, u=us, z=zs, y=ys, a=a,
        xhat_kal=kals, xhat_sec=secs, xhat_ls=lss, solver_iters=iters,
        kkt_residual=kkts, solver_converged=convs, kalman_equivalent=equivs)


@dataclasses.dataclass(frozen=True)
class MseReport:
    """Mean squared estimation error of each estimator over the tail.

    The scalar fields average ||x_hat(k) - x(k)||^2 over steps
    k >= burn_in; the per-state arrays split the same average by
    coordinate, so each scalar is the sum of its array.
    """

    kalman: float
    secure: float
    least_squares: float
    kalman_per_state: np.ndarray
    secure_per_state: np.ndarray
    least_squares_per_state: np.ndarray
    samples: int


def mse(trace: SimulationTrace, burn_in: int = DEFAULT_BURN_IN) -> MseReport:
    """Tail mean squared error of each estimator in `trace`."""
    k = np.arange(1, trace.horizon + 1)
    keep = k >= burn_in
    count = int(keep.sum())
    if count == 0:
        raise ValueError(f"horizon {trace.horizon} leaves no samples at or "
                         f"after burn-in {burn_in}")
    truth = trace.x[keep]

    def per_state(est):
        return np.mean((est[keep] - truth) ** 2, axis=0)

    pk = per_state(trace.xhat_kal)
    ps = per_state(trace.xhat_sec)
    pl = per_state(trace.xhat_ls)
    return MseReport(
        kalman=float(pk.sum()), secure=float(ps.sum()),
        least_squares=float(pl.sum()), kalman_per_state=pk,
        secure_per_state=ps, least_squares_per_state=pl, samples=count)


@dataclasses.dataclass(frozen=True)
class SecurityGap:
    """Per-step distance between paired attacked and clean estimates.

    Each array holds d_k = ||x_hat_attacked(k) - x_hat_clean(k)||_2 for
    one estimator; max_* is the largest gap over the whole run and
    tail_mean_* the average over k >= burn_in.
    """

    kalman: np.ndarray
    secure: np.ndarray
    least_squares: np.ndarray
    max_kalman: float
    max_secure: float
    max_least_squares: float
    tail_mean_kalman: float
    tail_mean_secure: float
    tail_mean_least_squares: float


def security_gap(trace_clean: SimulationTrace,
                 trace_attacked: SimulationTrace,
                 burn_in: int = DEFAULT_BURN_IN) -> SecurityGap:
    """Estimator-by-estimator attack impact for a paired pair of runs.

    Both traces must come from the same (seed, trial) and horizon so
    their noise realizations match; the clean measurement streams are
    checked for exact equality.
    """
    if (trace_clean.seed, trace_clean.trial) != (trace_attacked.seed,
                                                 trace_attacked.trial):
        raise ValueError(
            f"traces are not paired: seeds (seed={trace_clean.seed}, "
            f"trial={trace_clean.trial}) vs (seed={trace_attacked.seed}, "
            f"trial={trace_attacked.trial})")
    if trace_clean.horizon != trace_attacked.horizon:
        raise ValueError(f"traces are not paired: horizons "
                         f"{trace_clean.horizon} vs {trace_attacked.horizon}")
    if not np.array_equal(trace_clean.z, trace_attacked.z):
        raise ValueError("traces are not paired: clean measurement streams "
                         "differ")
    k = np.arange(1, trace_clean.horizon + 1)
    keep = k >= burn_in
    if not keep.any():
        raise ValueError(f"horizon {trace_clean.horizon} leaves no samples "
                         f"at or after burn-in {burn_in}")

    def gap(field):
        d = getattr(trace_attacked, field) - getattr(trace_clean, field)
        return np.linalg.norm(d, axis=1)

    dk = gap("xhat_kal")
    ds = gap("xhat_sec")
    dl = gap("xhat_ls")
    return SecurityGap(
        kalman=dk, secure=ds, least_squares=dl,
        max_kalman=float(dk.max()), max_secure=float(ds.max()),
        max_least_squares=float(dl.max()),
        tail_mean_kalman=float(dk[keep].mean()),
        tail_mean_secure=float(ds[keep].mean()),
        tail_mean_least_squares=float(dl[keep].mean()))


@dataclasses.dataclass(frozen=True)
class SweepRow:
    """One grid point of a Monte Carlo sweep (trial means and stderrs)."""

    sweep_value: float
    mse_secure_no_attack: float
    mse_secure_attack: float
    mse_kalman_no_attack: float
    mse_kalman_attack: float
    stderr_secure_no_attack: float
    stderr_secure_attack: float
    stderr_kalman_no_attack: float
    stderr_kalman_attack: float


def default_attack(m: int = 4) -> AttackSpec:
    """Reference attack for the sweeps: uniform noise on the last sensor."""
    return AttackSpec(support=(m - 1,), kind="uniform",
                      magnitude=math.pi / 2, start_step=0)


def _paired_mses(model, design, decomposition, attack, gamma, horizon, seed,
                 trial, burn_in, problem):
    """(secure_clean, secure_attacked, kalman_clean, kalman_attacked)."""
    clean = simulate(model, design, decomposition, AttackSpec(), gamma,
                     horizon, seed, trial=trial, problem=problem)
    hit = simulate(model, design, decomposition, attack, gamma, horizon,
                   seed, trial=trial, problem=problem)
    mc, mh = mse(clean, burn_in), mse(hit, burn_in)
    return (mc.secure, mh.secure, mc.kalman, mh.kalman)


def _aggregate(value, per_trial) -> SweepRow:
    """Collapse per-trial (sc, sa, kc, ka) tuples into one SweepRow."""
    data = np.asarray(per_trial)
    means = data.mean(axis=0)
    if data.shape[0] > 1:
        errs = data.std(axis=0, ddof=1) / math.sqrt(data.shape[0])
    else:
        errs = np.zeros(4)
    return SweepRow(
        sweep_value=float(value),
        mse_secure_no_attack=float(means[0]),
        mse_secure_attack=float(means[1]),
        mse_kalman_no_attack=float(means[2]),
        mse_kalman_attack=float(means[3]),
        stderr_secure_no_attack=float(errs[0]),
        stderr_secure_attack=float(errs[1]),
        stderr_kalman_no_attack=float(errs[2]),
        stderr_kalman_attack=float(errs[3]))


def _run_sweep(model, design, decomposition, points, trials, horizon, seed,
               burn_in, threads) -> list[SweepRow]:
    """Shared sweep driver; points is a list of (value, attack, gamma).

    Trials run in parallel, each owning its own RNG substream and
    warm-start chain; results are reduced in fixed trial order so the
    output does not depend on scheduling.
    """
    problem = build_fusion_problem(decomposition.H_stack,
                                   decomposition.Mtilde_factor)

    def run_trial(trial):
        return [_paired_mses(model, design, decomposition, attack, gamma,
                             horizon, seed, trial, burn_in, problem)
                for _, attack, gamma in points]

    if threads is not None and threads < 1:
        raise ValueError(f"threads must be at least 1, got {threads}")
    workers = threads if threads is not None else (os.cpu_count() or 1)
    workers = min(workers, trials)
    if workers > 1:
        with concurrent.futures.ThreadPoolExecutor(workers) as pool:
            by_trial = list(pool.map(run_trial, range(trials)))
    else:
        by_trial = [run_trial(t) for t in range(trials)]

    rows = []
    for j, (value, _, _) in enumerate(points):
        rows.append(_aggregate(value, [by_trial[t][j] for t in range(trials)]))
    return rows


def sweep_gamma(model: SystemModel, design: SpectralDesign,
                decomposition: SensorDecomposition,
                gammas=DEFAULT_GAMMAS, attack: AttackSpec | None = None,
                trials: int = DEFAULT_TRIALS, horizon: int = DEFAULT_HORIZON,
                seed: int = 0, burn_in: int = DEFAULT_BURN_IN,
                threads: int | None = None) -> list[SweepRow]:
    """MSE of the secure and fixed-gain estimators across gamma values.

    Every gamma runs the same paired clean/attacked trials (same seeds,
    same noise), so columns differ only through the estimators.
    """
    gammas = [float(g) for g in gammas]
    if not gammas:
        raise ValueError("gamma grid is empty")
    if trials < 1:
        raise ValueError(f"trials must be at least 1, got {trials}")
    if attack is None:
        attack = default_attack(model.m)
    points = [(g, attack, g) for g in gammas]
    return _run_sweep(model, design, decomposition, points, trials, horizon,
                      seed, burn_in, threads)


def sweep_attack_magnitude(model: SystemModel, design: SpectralDesign,
                           decomposition: SensorDecomposition,
                           magnitudes=DEFAULT_MAGNITUDES,
                           gamma: float = 5.0,
                           attack: AttackSpec | None = None,
                           trials: int = DEFAULT_TRIALS,
                           horizon: int = DEFAULT_HORIZON, seed: int = 0,
                           burn_in: int = DEFAULT_BURN_IN,
                           threads: int | None = None) -> list[SweepRow]:
    """MSE across attack magnitudes at a fixed gamma.

    The attack argument fixes the support/kind/start; its magnitude is
    replaced by each grid value in turn (magnitude 0 degenerates to no
    attack, so those columns coincide up to solver determinism).
    """
    magnitudes = [float(v) for v in magnitudes]
    if not magnitudes:
        raise ValueError("magnitude grid is empty")
    if trials < 1:
        raise ValueError(f"trials must be at least 1, got {trials}")
    if attack is None:
        attack = default_attack(model.m)
    points = [(v, dataclasses.replace(attack, magnitude=v), float(gamma))
              for v in magnitudes]
    return _run_sweep(model, design, decomposition, points, trials, horizon,
                      seed, burn_in, threads)


def _fmt(value) -> str:
    return "%.17g" % float(value)


def trace_csv(trace: SimulationTrace) -> str:
    """Render a trace as CSV text (17 significant digits throughout)."""
    n = trace.x.shape[1]
    q = trace.u.shape[1]
    m = trace.y.shape[1]
    header = (["k"]
              + [f"x_{i + 1}" for i in range(n)]
              + [f"u_{i + 1}" for i in range(q)]
              + [f"y_{i + 1}" for i in range(m)]
              + [f"a_{i + 1}" for i in range(m)]
              + [f"xhat_kal_{i + 1}" for i in range(n)]
              + [f"xhat_sec_{i + 1}" for i in range(n)]
              + [f"xhat_ls_{i + 1}" for i in range(n)]
              + ["solver_iters", "kkt_residual", "solver_warn"])
    lines = [",".join(header)]
    for t in range(trace.horizon):
        row = ([str(t + 1)]
               + [_fmt(v) for v in trace.x[t]]
               + [_fmt(v) for v in trace.u[t]]
               + [_fmt(v) for v in trace.y[t]]
               + [_fmt(v) for v in trace.a[t]]
               + [_fmt(v) for v in trace.xhat_kal[t]]
               + [_fmt(v) for v in trace.xhat_sec[t]]
               + [_fmt(v) for v in trace.xhat_ls[t]]
               + [str(int(trace.solver_iters[t])),
                  _fmt(trace.kkt_residual[t]),
                  str(0 if trace.solver_converged[t] else 1)])
        lines.append(",".join(row))
    return "\n".join(lines) + "\n"


def sweep_csv(rows: list[SweepRow]) -> str:
    """Render sweep rows as CSV text (17 significant digits throughout)."""
    fields = ("sweep_value", "mse_secure_no_attack", "mse_secure_attack",
              "mse_kalman_no_attack", "mse_kalman_attack",
              "stderr_secure_no_attack", "stderr_secure_attack",
              "stderr_kalman_no_attack", "stderr_kalman_attack")
    lines = [",".join(fields)]
    for row in rows:
        lines.append(",".join(_fmt(getattr(row, f)) for f in fields))
    return "\n".join(lines) + "\n"


def write_trace_csv(trace: SimulationTrace, path) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(trace_csv(trace))


def write_sweep_csv(rows: list[SweepRow], path) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(sweep_csv(rows))
