"""Local estimator bank and secure fusion of its canonical measurement.

Every sensor runs a bank of n scalar filters, one per mode pi_j of the
fixed-gain filter's closed loop.  Projecting each bank state through its
canonical matrix P_i and stacking gives a redundant linear view of the
plant state, Y = H x + mu + nu, where mu carries the stationary Gaussian
residual (covariance Mtilde) and nu absorbs whole-sensor corruption.  The
fused estimate minimizes

    0.5 * mu' Mtilde^-1 mu + gamma * sum_a |nu_a|

over (x, nu) after eliminating mu = Y - H x - nu.  When the weighted
least-squares residual already satisfies the threshold condition
max |Mtilde^-1 mu_ls| <= gamma the l1 term keeps nu at zero and the
solution coincides with the least-squares baseline, i.e. with the
fixed-gain Kalman estimate; that regime is certified cheaply and the
iterative solver only runs when the data leave it.

All arithmetic is complex; conjugate-pair symmetry of the problem data
keeps the optimum's state block real, which is asserted before the
imaginary residue is dropped.
"""

from __future__ import annotations

import dataclasses

import numpy as np
import scipy.linalg

from .decomposition import CANONICAL_RTOL, SensorDecomposition
from .model import SystemModel, psd_factor
from .spectral import SpectralDesign

KKT_TOL = 1e-8        # KKT residual target on unit-scaled problems
MAX_ITER = 20000
IMAG_TOL = 1e-6       # imaginary residue allowed on the fused estimate
BURN_IN = 50          # steps before the bank counts as stationary
STALL_WINDOW = 400    # iterations without KKT progress before giving up
REFINE_EVERY = 25     # gradient iterations between active-set solves
REFINE_PASSES = 12    # add/drop/phase passes inside one active-set solve


@dataclasses.dataclass
class LocalBankState:
    """States of the per-sensor scalar filter banks at time index k."""

    zeta: list
    k: int = 0


@dataclasses.dataclass(frozen=True)
class FusionResult:
    """Solution of one fusion problem.

    mu is the raw residual Y - H x_tilde - nu, so the decomposition
    Y = H x_tilde + mu + nu holds exactly by construction.  x_ls is the
    weighted least-squares baseline; kalman_equivalent records whether
    the threshold condition held, in which case x_tilde equals x_ls and
    nu is zero.  converged is False when the solver hit its iteration
    or stagnation limit; the best iterate found is still returned.
    """

    x_tilde: np.ndarray
    mu: np.ndarray
    nu: np.ndarray
    kkt_residual: float
    iterations: int
    kalman_equivalent: bool
    x_ls: np.ndarray
    converged: bool


def initial_bank(model: SystemModel) -> LocalBankState:
    """All-zero bank, matching a zero prior state estimate."""
    return LocalBankState(
        zeta=[np.zeros(model.n, dtype=complex) for _ in range(model.m)], k=0)


def local_estimator_step(bank: LocalBankState, y, u,
                         decomposition: SensorDecomposition,
                         model: SystemModel) -> LocalBankState:
    """Advance every sensor's filter bank by one measurement.

    zeta_i(k+1) = Pi zeta_i(k) + 1 y_i(k+1) + (G_i - 1 C_i) B u(k); the
    input term keeps the residual zeta_i - G_i x driven by noise and
    attack only, independent of the control signal.
    """
    y = np.asarray(y, dtype=float).reshape(-1)
    u = np.asarray(u, dtype=float).reshape(-1)
    n, m = model.n, model.m
    if y.shape[0] != m:
        raise ValueError(f"measurement has length {y.shape[0]}, expected {m}")
    B = model.input_matrix()
    if u.shape[0] != B.shape[1]:
        raise ValueError(f"input has length {u.shape[0]}, expected {B.shape[1]}")
    z = np.asarray(bank.zeta, dtype=complex)
    if z.shape != (m, n):
        raise ValueError(f"bank holds states of shape {z.shape}, expected {(m, n)}")
    Bu = B @ u
    drive = (decomposition.G_stack @ Bu).reshape(m, n) - (model.C @ Bu)[:, None]
    z_next = decomposition.Pi[None, :] * z + y[:, None] + drive
    return LocalBankState(zeta=list(z_next), k=bank.k + 1)


def assemble_canonical_measurement(bank: LocalBankState,
                                   decomposition: SensorDecomposition) -> np.ndarray:
    """Stack P_i zeta_i over sensors into the fused measurement Y."""
    return decomposition.Ptilde @ np.concatenate(
        [np.asarray(z, dtype=complex).reshape(-1) for z in bank.zeta])


def _cho_solve(factor, rhs):
    c, lower = factor
    if np.iscomplexobj(rhs) and not np.iscomplexobj(c):
        c = c.astype(complex)
    return scipy.linalg.cho_solve((c, lower), rhs, check_finite=False)


def _real_vector(x, tol, label):
    x = np.asarray(x)
    if not np.iscomplexobj(x):
        return x.astype(float)
    scale = max(1.0, float(np.abs(x.real).max(initial=0.0)))
    imag = float(np.abs(x.imag).max(initial=0.0))
    assert imag <= tol * scale, \
        f"{label} has imaginary residue {imag:.3e} (tolerance {tol * scale:.3e})"
    return x.real.copy()


def _normal_operator(H, factor):
    MiH = _cho_solve(factor, H)
    normal = H.conj().T @ MiH
    normal = 0.5 * (normal + normal.conj().T)
    vals = np.linalg.eigvalsh(normal)
    if vals[0] <= 1e-12 * max(vals[-1], 1e-300):
        raise ValueError("state unobservable in canonical coordinates")
    return MiH, normal


@dataclasses.dataclass(frozen=True)
class FusionProblem:
    """Precomputed operators for repeated fusion solves on one design."""

    H: np.ndarray          # mn x n
    Ht: np.ndarray         # n x mn, H conjugate-transposed
    Minv: np.ndarray       # inverse of the (ridged) residual covariance
    wls_op: np.ndarray     # x_ls = wls_op @ Y
    lipschitz: float       # largest eigenvalue of [H I]' Minv [H I]
    W: np.ndarray          # [H I]' Minv [H I], the stacked quadratic form
    bop: np.ndarray        # [H I]' Minv, so the linear term is bop @ Y

    @property
    def is_real(self) -> bool:
        """True when the problem data allowed an all-real formulation."""
        return not np.iscomplexobj(self.H)


def _lipschitz_constant(H, Ht, Minv, iters=500, tol=1e-12):
    # power iteration from the all-ones direction; deterministic, and
    # equivariant under sensor-block permutations of the problem data
    mn, n = H.shape
    vx = np.ones(n, dtype=complex) / np.sqrt(n + mn)
    vnu = np.ones(mn, dtype=complex) / np.sqrt(n + mn)
    lam = 0.0
    for _ in range(iters):
        s = Minv @ (H @ vx + vnu)
        wx = Ht @ s
        lam_new = float(np.sqrt((np.vdot(wx, wx) + np.vdot(s, s)).real))
        if lam_new <= 0.0:
            # start vector hit the kernel of [H I]; nudge the state block
            vx = vx + 1.0
            norm = np.sqrt(np.vdot(vx, vx).real + np.vdot(vnu, vnu).real)
            vx, vnu = vx / norm, vnu / norm
            continue
        vx, vnu = wx / lam_new, s / lam_new
        if abs(lam_new - lam) <= tol * lam_new:
            lam = lam_new
            break
        lam = lam_new
    # the estimate approaches the top eigenvalue from below; pad it so the
    # 1/L step is never long
    return lam * (1.0 + 1e-3)


REAL_DUST = 1e-12     # relative imaginary residue treated as rounding


def build_fusion_problem(H_stack, Mtilde_factor) -> FusionProblem:
    """Assemble the solve operators shared by every time step.

    The canonical projectors realify conjugate pairs, so on any design
    built by this package H and Mtilde are real up to rounding; in that
    case every operator is stored real and the whole solve runs in real
    arithmetic, which keeps the estimate exactly real.  Genuinely
    complex data keeps the complex formulation.
    """
    H = np.asarray(H_stack, dtype=complex)
    mn = H.shape[0]
    Minv = _cho_solve(Mtilde_factor, np.eye(mn, dtype=complex))
    Minv = 0.5 * (Minv + Minv.conj().T)
    MiH, normal = _normal_operator(H, Mtilde_factor)
    wls_op = np.linalg.solve(normal, MiH.conj().T)
    dust = max(float(np.abs(H.imag).max(initial=0.0))
               / max(float(np.abs(H.real).max(initial=0.0)), 1e-300),
               float(np.abs(Minv.imag).max(initial=0.0))
               / max(float(np.abs(Minv.real).max(initial=0.0)), 1e-300))
    if dust <= REAL_DUST:
        H = H.real.copy()
        Minv = Minv.real.copy()
        MiH = MiH.real.copy()
        wls_op = wls_op.real.copy()
    Ht = H.conj().T.copy()
    MiHt = MiH.conj().T
    W = np.vstack([np.hstack([Ht @ MiH, MiHt]), np.hstack([MiH, Minv])])
    W = 0.5 * (W + W.conj().T)
    bop = np.vstack([MiHt, Minv])
    return FusionProblem(H=H, Ht=Ht, Minv=Minv, wls_op=wls_op,
                         lipschitz=_lipschitz_constant(H, Ht, Minv),
                         W=W, bop=bop)


def weighted_least_squares(Y, H_stack, Mtilde_factor):
    """Solve min 0.5 mu' Mtilde^-1 mu s.t. Y = H x + mu.

    Returns (x_ls, mu_ls) with x_ls real (the imaginary residue is
    checked against the canonical tolerance, then dropped) and mu_ls the
    raw residual Y - H x_ls.
    """
    Y = np.asarray(Y, dtype=complex).reshape(-1)
    H = np.asarray(H_stack, dtype=complex)
    MiH, normal = _normal_operator(H, Mtilde_factor)
    x = np.linalg.solve(normal, MiH.conj().T @ Y)
    x_ls = _real_vector(x, CANONICAL_RTOL, "least-squares estimate")
    return x_ls, Y - H @ x_ls


def kalman_equivalence_condition(mu_ls, Mtilde_factor, gamma) -> bool:
    """max |Mtilde^-1 mu_ls| <= gamma: the l1 term keeps nu at zero."""
    d = _cho_solve(Mtilde_factor, np.asarray(mu_ls, dtype=complex).reshape(-1))
    return bool(np.abs(d).max(initial=0.0) <= gamma)


def fusion_objective(Y, H_stack, Mtilde_factor, x, nu, gamma) -> float:
    """Objective value at (x, nu), for diagnostics and tests."""
    Y = np.asarray(Y, dtype=complex).reshape(-1)
    H = np.asarray(H_stack, dtype=complex)
    nu = np.asarray(nu, dtype=complex).reshape(-1)
    r = Y - H @ np.asarray(x, dtype=complex).reshape(-1) - nu
    s = _cho_solve(Mtilde_factor, r)
    return float(0.5 * np.vdot(r, s).real + gamma * np.abs(nu).sum())


def _soft_threshold(z, tau):
    mod = np.maximum(np.abs(z), 1e-300)
    return z * np.maximum(0.0, 1.0 - tau / mod)


def _kkt_residual(Ht, s, nu, gamma):
    # s = Minv (Y - H x - nu); stationarity in x and dual feasibility in nu
    stat_x = np.abs(Ht @ s).max(initial=0.0)
    mod = np.abs(nu)
    active = mod > 0.0
    direction = np.zeros_like(nu)
    direction[active] = nu[active] / mod[active]
    deviation = np.where(active, np.abs(s - gamma * direction),
                         np.maximum(0.0, np.abs(s) - gamma))
    return float(max(stat_x, deviation.max(initial=0.0)))


def _refine_support(Y, problem, gamma, x, nu, s, b, f_cur, kkt_cur, f_tol,
                    eps_eff):
    """Pin the active set suggested by the current iterate and solve it.

    On a fixed support S with fixed signs (real data) or phases (complex
    data), the optimum satisfies a linear system in (x, |nu_S|) built
    from blocks of W.  The unique optimum can hold at most mn - n active
    coordinates (the stacked design [H I_S] must keep full column rank),
    so larger guesses are trimmed to the strongest ones and active-set
    moves explore from there.

    Returns (x, nu, r, s, f, kkt) when the refined point improves on the
    incoming iterate or meets the KKT tolerance, else None.
    """
    if problem.is_real:
        return _refine_signs(Y, problem, gamma, x, nu, f_cur, kkt_cur,
                             f_tol, eps_eff)
    return _refine_phases(Y, problem, gamma, nu, s, b, f_cur, kkt_cur,
                          f_tol, eps_eff)


def _refine_signs(Y, problem, gamma, x, nu, f_cur, kkt_cur, f_tol, eps_eff):
    """Active-set walk for real data, in the style of nonnegative least
    squares: jump to the face minimizer only when its magnitudes stay
    positive, otherwise step to the first blocking coordinate and drop
    it; grow the support one coordinate at a time from face-optimal
    points.  Each pass strictly decreases the objective, so the walk
    terminates, normally on the exact optimizer of the sign pattern."""
    H, Ht, Minv, W = problem.H, problem.Ht, problem.Minv, problem.W
    b = problem.bop @ Y
    mn, n = H.shape
    room = mn - n
    if room <= 0:
        return None
    mask = nu != 0.0
    if int(mask.sum()) > room:
        order = np.argsort(np.abs(nu))
        mask = np.zeros(mn, dtype=bool)
        mask[order[-room:]] = True
    sigma = np.sign(nu) * mask
    t_full = np.abs(nu) * mask
    x_cur = x.copy()
    states = np.arange(n)
    last_added = -1
    for _ in range(4 * REFINE_PASSES):
        act = np.flatnonzero(mask)
        idx = np.concatenate([states, n + act])
        u = np.concatenate([np.ones(n), sigma[act]])
        A = u[:, None] * W[np.ix_(idx, idx)] * u[None, :]
        rhs = u * b[idx]
        rhs[n:] -= gamma
        try:
            sol = np.linalg.solve(A, rhs)
        except np.linalg.LinAlgError:
            return None
        if not np.all(np.isfinite(sol)):
            return None
        x_f, t_f = sol[:n], sol[n:]
        neg = t_f < 0.0
        if neg.any():
            # partial step up to the first magnitude hitting zero
            t_act = t_full[act]
            ratios = np.where(neg, t_act / np.maximum(t_act - t_f, 1e-300),
                              np.inf)
            j_blk = int(np.argmin(ratios))
            alpha = float(ratios[j_blk])
            if not np.isfinite(alpha) or alpha >= 1.0:
                return None
            if alpha <= 0.0 and act[j_blk] == last_added:
                return None
            x_cur = x_cur + alpha * (x_f - x_cur)
            t_new = np.maximum(t_act + alpha * (t_f - t_act), 0.0)
            t_new[j_blk] = 0.0
            t_full[act] = t_new
            sigma[act[j_blk]] = 0.0
            mask[act[j_blk]] = False
            continue
        # face minimizer feasible: jump, then grow by the worst violator
        x_cur = x_f
        t_full[:] = 0.0
        t_full[act] = t_f
        nu_cur = t_full * sigma
        r_cur = Y - H @ x_cur - nu_cur
        s_cur = Minv @ r_cur
        offv = ~mask & (np.abs(s_cur) > gamma * (1.0 + 1e-9))
        if not offv.any() or int(mask.sum()) >= room:
            break
        j = int(np.argmax(np.abs(s_cur) * offv))
        mask[j] = True
        sigma[j] = 1.0 if s_cur[j] > 0.0 else -1.0
        t_full[j] = 0.0
        last_added = j
    else:
        nu_cur = t_full * sigma
        r_cur = Y - H @ x_cur - nu_cur
        s_cur = Minv @ r_cur
    f_new = float(0.5 * np.dot(r_cur, s_cur) + gamma * t_full.sum())
    kkt_new = _kkt_residual(Ht, s_cur, nu_cur, gamma)
    if (kkt_new <= eps_eff or f_new < f_cur - f_tol
            or (f_new <= f_cur + f_tol and kkt_new < kkt_cur)):
        return x_cur, nu_cur, r_cur, s_cur, f_new, kkt_new
    return None


def _refine_phases(Y, problem, gamma, nu, s, b, f_cur, kkt_cur, f_tol,
                   eps_eff):
    """Fixed-phase active-set heuristic for genuinely complex data: solve
    the support system at frozen phases, realign phases with the
    residual, and iterate a bounded number of passes."""
    H, Ht, Minv, W = problem.H, problem.Ht, problem.Minv, problem.W
    mn, n = H.shape
    room = mn - n
    if room <= 0:
        return None
    mask = np.abs(nu) > 0.0
    if int(mask.sum()) > room:
        order = np.argsort(np.abs(nu))
        mask = np.zeros(mn, dtype=bool)
        mask[order[-room:]] = True
    # seed phases from the residual; at the optimum s = gamma*phi on the
    # support, so near convergence this guess is already tight
    phi = np.ones(mn, dtype=W.dtype)
    smag = np.abs(s)
    seen = smag > 1e-300
    phi[seen] = s[seen] / smag[seen]
    # the subproblem is solved in real variables (x real, nu = t*phi with
    # t real) so the state block cannot pick up an imaginary residue
    x_new = None
    phase_delta = np.inf
    for _ in range(REFINE_PASSES):
        act = np.flatnonzero(mask)
        idx = np.concatenate([np.arange(n), n + act])
        u = np.concatenate([np.ones(n, dtype=W.dtype), phi[act]])
        A = (u.conj()[:, None] * W[np.ix_(idx, idx)] * u[None, :]).real
        rhs = (u.conj() * b[idx]).real
        rhs[n:] -= gamma
        try:
            sol = np.linalg.solve(A, rhs)
        except np.linalg.LinAlgError:
            return None
        if not np.all(np.isfinite(sol)):
            return None
        x_new = sol[:n].astype(W.dtype)
        t_mag = sol[n:]
        nu_new = np.zeros(mn, dtype=W.dtype)
        nu_new[act] = t_mag * phi[act]
        r_new = Y - H @ x_new - nu_new
        s_new = Minv @ r_new
        drops = act[t_mag <= 0.0]
        viol = np.flatnonzero(~mask & (np.abs(s_new) > gamma * (1.0 + 1e-9)))
        if drops.size == 0 and viol.size == 0:
            # realign phases with the residual; the solve pinned the real
            # part of phi' s at gamma, so s is nonzero on the support
            sa = s_new[act]
            new_phi = sa / np.abs(sa)
            phase_delta = float(np.abs(new_phi - phi[act]).max(initial=0.0))
            phi[act] = new_phi
            if phase_delta <= 1e-12:
                break
            continue
        phase_delta = np.inf
        mask[drops] = False
        if viol.size and drops.size == 0 and int(mask.sum()) >= room:
            # no slack left: swap the weakest active for the worst violator
            mask[act[np.argmin(t_mag)]] = False
        headroom = room - int(mask.sum())
        if viol.size and headroom > 0:
            if viol.size > headroom:
                viol = viol[np.argsort(np.abs(s_new[viol]))[::-1][:headroom]]
            mask[viol] = True
            phi[viol] = s_new[viol] / np.abs(s_new[viol])
        if not mask.any():
            return None
    if x_new is None:
        return None
    if phase_delta > 1e-10:
        # an unfinished phase iteration would hand the gradient loop an
        # iterate off the conjugate-symmetric subspace, whose asymmetry
        # then survives in the state block; only a finished one is safe
        return None
    f_new = float(0.5 * np.vdot(r_new, s_new).real
                  + gamma * np.abs(nu_new).sum())
    kkt_new = _kkt_residual(Ht, s_new, nu_new, gamma)
    if (kkt_new <= eps_eff or f_new < f_cur - f_tol
            or (f_new <= f_cur + f_tol and kkt_new < kkt_cur)):
        return x_new, nu_new, r_new, s_new, f_new, kkt_new
    return None


def secure_fuse(Y, H_stack, Mtilde_factor, gamma, *, eps_kkt=KKT_TOL,
                max_iter=MAX_ITER, warm_start=None, problem=None,
                history=None) -> FusionResult:
    """Solve the l1-regularized fusion problem for one measurement Y.

    warm_start is an optional (x, nu) pair, typically the previous time
    step's solution; problem is an optional prebuilt FusionProblem (it
    must match H_stack and Mtilde_factor).  history, when given a list,
    collects the objective value of every accepted iterate.

    The solver is an accelerated proximal gradient method with step 1/L:
    candidates that would raise the objective trigger a momentum restart
    and a plain descent step, so the accepted objective sequence is
    non-increasing up to the rounding floor of the objective evaluation
    (the quadratic form cancels large terms, so its value carries an
    absolute error far above machine epsilon relative to f itself).
    Acceleration is also restarted whenever the momentum direction turns
    against the latest step (adaptive restart), which keeps the iterate
    from orbiting the optimum when many coordinates of nu are active.
    Convergence is declared when the KKT residual drops below
    eps_kkt * max(1, gamma); on stagnation or max_iter the best iterate
    found is returned with converged False.
    """
    if gamma <= 0:
        raise ValueError("γ = 0 leaves x̃ non-identifiable")
    if problem is None:
        problem = build_fusion_problem(H_stack, Mtilde_factor)
    Y = np.asarray(Y, dtype=complex).reshape(-1)
    H, Ht, Minv = problem.H, problem.Ht, problem.Minv
    mn, n = H.shape
    if problem.is_real:
        dust = float(np.abs(Y.imag).max(initial=0.0))
        scale = max(float(np.abs(Y.real).max(initial=0.0)), 1e-300)
        assert dust <= 1e-9 * scale, \
            f"complex measurement on a real-structured problem (imag {dust:.3e})"
        Y = Y.real.copy()

    x_ls = _real_vector(problem.wls_op @ Y, CANONICAL_RTOL,
                        "least-squares estimate")
    mu_ls = Y - H @ x_ls
    d_ls = Minv @ mu_ls
    f_ls = float(0.5 * np.vdot(mu_ls, d_ls).real)

    if float(np.abs(d_ls).max(initial=0.0)) <= gamma:
        if history is not None:
            history.append(f_ls)
        return FusionResult(
            x_tilde=x_ls.copy(), mu=mu_ls, nu=np.zeros(mn, dtype=Y.dtype),
            kkt_residual=float(np.abs(Ht @ d_ls).max(initial=0.0)),
            iterations=0, kalman_equivalent=True, x_ls=x_ls, converged=True)

    # start from the better of the warm start and the least-squares point
    x = x_ls.astype(Y.dtype)
    nu = np.zeros(mn, dtype=Y.dtype)
    r_z, s_z, f_z = mu_ls, d_ls, f_ls
    if warm_start is not None:
        wx = np.asarray(warm_start[0], dtype=complex).reshape(-1)
        wnu = np.asarray(warm_start[1], dtype=complex).reshape(-1)
        if problem.is_real:
            wx, wnu = wx.real.copy(), wnu.real.copy()
        r_w = Y - H @ wx - wnu
        s_w = Minv @ r_w
        f_w = float(0.5 * np.vdot(r_w, s_w).real + gamma * np.abs(wnu).sum())
        if f_w < f_z:
            x, nu, r_z, s_z, f_z = wx, wnu, r_w, s_w, f_w

    L = problem.lipschitz
    step = 1.0 / L
    thresh = gamma * step
    t = 1.0
    mx, mnu, s_m = x, nu, s_z
    x_prev, nu_prev, s_prev = x, nu, s_z

    # the accept tolerance must sit above the evaluation rounding of the
    # quadratic form, whose summands can dwarf the cancelled result
    f_tol = 1e-13 * max(1.0, float(np.linalg.norm(mu_ls))
                        * float(np.linalg.norm(d_ls)))

    eps_eff = eps_kkt * max(1.0, gamma)
    kkt = _kkt_residual(Ht, s_z, nu, gamma)
    best = (kkt, x, nu, f_z)
    progress_ref, progress_iter = kkt, 0
    converged = kkt <= eps_eff
    backoffs = 0
    it = 0
    if history is not None:
        history.append(f_z)

    b_vec = None
    refine_at, refine_gap = 1, REFINE_EVERY

    while not converged and it < max_iter:
        it += 1
        if it == refine_at:
            if b_vec is None:
                b_vec = problem.bop @ Y
            ref = _refine_support(Y, problem, gamma, x, nu, s_z, b_vec,
                                  f_z, kkt, f_tol, eps_eff)
            if ref is None:
                refine_gap = min(2 * refine_gap, 16 * REFINE_EVERY)
            else:
                refine_gap = REFINE_EVERY
                x_prev, nu_prev, s_prev = x, nu, s_z
                x, nu, r_z, s_z, f_z, kkt = ref
                if history is not None:
                    history.append(f_z)
                if kkt < best[0]:
                    best = (kkt, x, nu, f_z)
                if kkt <= eps_eff:
                    converged = True
                    break
                if kkt < progress_ref:
                    progress_ref = kkt
                progress_iter = it
                t = 1.0
                mx, mnu, s_m = x, nu, s_z
            refine_at = it + refine_gap
            if ref is not None:
                continue
        cx = mx + step * (Ht @ s_m)
        cnu = _soft_threshold(mnu + step * s_m, thresh)
        r_c = Y - H @ cx - cnu
        s_c = Minv @ r_c
        f_c = float(0.5 * np.vdot(r_c, s_c).real + gamma * np.abs(cnu).sum())
        if f_c > f_z + f_tol:
            # momentum overshot: restart and take a plain step from z
            t = 1.0
            cx = x + step * (Ht @ s_z)
            cnu = _soft_threshold(nu + step * s_z, thresh)
            r_c = Y - H @ cx - cnu
            s_c = Minv @ r_c
            f_c = float(0.5 * np.vdot(r_c, s_c).real + gamma * np.abs(cnu).sum())
            if f_c > f_z + f_tol:
                # even the plain step fails to descend: either L was
                # underestimated or the objective is at machine precision
                backoffs += 1
                if backoffs > 8:
                    break
                L *= 2.0
                step = 1.0 / L
                thresh = gamma * step
                mx, mnu, s_m = x, nu, s_z
                continue
        # adaptive restart: momentum pointing away from the step taken
        if (np.vdot(mx - cx, cx - x) + np.vdot(mnu - cnu, cnu - nu)).real > 0.0:
            t = 1.0
        x_prev, nu_prev, s_prev = x, nu, s_z
        x, nu, r_z, s_z, f_z = cx, cnu, r_c, s_c, f_c
        if history is not None:
            history.append(f_z)
        kkt = _kkt_residual(Ht, s_z, nu, gamma)
        if kkt < best[0]:
            best = (kkt, x, nu, f_z)
        if kkt <= eps_eff:
            converged = True
            break
        if kkt < 0.99 * progress_ref:
            progress_ref, progress_iter = kkt, it
        elif it - progress_iter >= STALL_WINDOW:
            break
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        c = (t - 1.0) / t_next
        t = t_next
        mx = x + c * (x - x_prev)
        mnu = nu + c * (nu - nu_prev)
        s_m = s_z + c * (s_z - s_prev)

    if not converged:
        kkt, x, nu, f_z = best

    x_real = _real_vector(x, IMAG_TOL, "fused estimate")
    mu = Y - H @ x_real - nu
    kkt_out = _kkt_residual(Ht, Minv @ mu, nu, gamma)
    return FusionResult(
        x_tilde=x_real, mu=mu, nu=nu, kkt_residual=kkt_out, iterations=it,
        kalman_equivalent=False, x_ls=x_ls, converged=bool(kkt_out <= eps_eff))


def trial_generators(seed, trial):
    """Four independent Philox streams for one (seed, trial) pair.

    Order: initial state, process noise, measurement noise, attack.
    """
    children = np.random.SeedSequence((seed, trial)).spawn(4)
    return tuple(np.random.Generator(np.random.Philox(c)) for c in children)


def empirical_equivalence_probability(model: SystemModel, design: SpectralDesign,
                                      decomposition: SensorDecomposition,
                                      gamma, trials=20, horizon=500, seed=0,
                                      burn_in=BURN_IN):
    """Monte-Carlo estimate of how often the threshold condition holds.

    Runs attack-free closed-loop rollouts, counts the fraction of
    post-burn-in steps at which kalman_equivalence_condition is true,
    and returns (probability, standard error) with the standard error
    taken across trials.
    """
    if gamma <= 0:
        raise ValueError("γ = 0 leaves x̃ non-identifiable")
    if horizon <= burn_in:
        raise ValueError(f"horizon {horizon} leaves no samples after burn-in {burn_in}")
    assert np.allclose(decomposition.Pi, design.Pi), \
        "decomposition was built for a different design"
    problem = build_fusion_problem(decomposition.H_stack,
                                   decomposition.Mtilde_factor)
    A, C = model.A, model.C
    B = model.input_matrix()
    K = model.feedback_gain()
    Lq = psd_factor(model.Q)
    Lr = psd_factor(model.R)
    Ls = psd_factor(model.Sigma)

    fractions = []
    total = 0
    for trial in range(trials):
        g_x0, g_w, g_v, _ = trial_generators(seed, trial)
        x = Ls @ g_x0.standard_normal(model.n)
        bank = initial_bank(model)
        hits = 0
        total = 0
        for _ in range(horizon):
            u = -(K @ x)
            x = A @ x + B @ u + Lq @ g_w.standard_normal(model.n)
            y = C @ x + Lr @ g_v.standard_normal(model.m)
            bank = local_estimator_step(bank, y, u, decomposition, model)
            if bank.k > burn_in:
                Yc = assemble_canonical_measurement(bank, decomposition)
                mu = Yc - problem.H @ (problem.wls_op @ Yc)
                hits += float(np.abs(problem.Minv @ mu).max()) <= gamma
                total += 1
        fractions.append(hits / total)
    prob = float(np.mean(fractions))
    if trials > 1:
        stderr = float(np.std(fractions, ddof=1) / np.sqrt(trials))
    else:
        stderr = float(np.sqrt(max(prob * (1.0 - prob), 0.0) / total))
    return prob, stderr
