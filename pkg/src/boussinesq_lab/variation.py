"""Linearization machinery: tangent flow, adjoint transport, jump Gramian,
window control, and spectral-tail coupling diagnostics.

One integrator step at frozen base state U acts on a perturbation xi as
    M(U) xi = decay . xi + gain . D(U) xi,
    D(U) xi = -B(U, xi) - B(xi, U) + G xi,
the exact derivative of the deterministic substep (temperature kicks do not
depend on the state, so they drop out of the tangent). The adjoint is built
by transposing every pipeline stage literally, with the vorticity-slot
weight zeta* carried through, so forward/backward duality holds to roundoff
and the two Gramian assemblies agree to machine precision.

Stacks of perturbations are raw complex arrays of shape (batch, n, n) so the
FFT work is batched.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import spectral as sp
from .spectral import PhysicsParams, SpectralState
from .stepping import DEFAULT_SCHEME, Stepper


def _fft2(a):
    return np.fft.fft2(a, axes=(-2, -1))


def _ifft2r(a):
    return np.fft.ifft2(a, axes=(-2, -1)).real


# ---------------------------------------------------------------------------
# step linearization


@dataclass
class PreparedBase:
    """Physical-space fields of a base state reused by tangent and adjoint."""

    u1: np.ndarray
    u2: np.ndarray
    dw1: np.ndarray   # d(base w) / dx_i, dealiased
    dw2: np.ndarray
    dt1: np.ndarray   # d(base theta) / dx_i
    dt2: np.ndarray


class Linearizer:
    """Tangent and adjoint of one step of a fixed Stepper."""

    def __init__(self, stepper: Stepper):
        self.stepper = stepper
        self.params = stepper.params
        n = stepper.n
        self.n = n
        k1, k2 = sp.wavenumbers(n)
        self.ik1 = 1j * k1.astype(np.float64)
        self.ik2 = 1j * k2.astype(np.float64)
        kk = sp.ksq(n)
        inv = np.zeros((n, n))
        np.divide(1.0, kk, out=inv, where=kk > 0)
        self.m1 = 1j * k2 * inv          # velocity-from-vorticity multipliers
        self.m2 = -1j * k1 * inv
        self.dmask = sp.dealias_mask(n)
        self.bmask = self.dmask & (kk > 0)
        self.zeta = self.params.zeta_star
        self.g = self.params.g

    def prepare(self, base: SpectralState) -> PreparedBase:
        m = self.dmask
        wm = np.where(m, base.w_hat, 0.0)
        tm = np.where(m, base.theta_hat, 0.0)
        return PreparedBase(
            u1=_ifft2r(self.m1 * wm),
            u2=_ifft2r(self.m2 * wm),
            dw1=_ifft2r(self.ik1 * wm),
            dw2=_ifft2r(self.ik2 * wm),
            dt1=_ifft2r(self.ik1 * tm),
            dt2=_ifft2r(self.ik2 * tm),
        )

    def advance_base(self, base: SpectralState) -> SpectralState:
        """Deterministic substep, bit-identical to the plain simulation loop."""
        return self.stepper.advance(base)

    def drift_direction(self, prep: PreparedBase, xw: np.ndarray, xt: np.ndarray):
        """D(U) xi for a stack of perturbations (leading batch axes allowed)."""
        xwm = np.where(self.dmask, xw, 0.0)
        xtm = np.where(self.dmask, xt, 0.0)
        v1 = _ifft2r(self.m1 * xwm)
        v2 = _ifft2r(self.m2 * xwm)
        gxw = _ifft2r(self.ik1 * xwm)
        gyw = _ifft2r(self.ik2 * xwm)
        gxt = _ifft2r(self.ik1 * xtm)
        gyt = _ifft2r(self.ik2 * xtm)
        adv_w = _fft2(prep.u1 * gxw + prep.u2 * gyw + v1 * prep.dw1 + v2 * prep.dw2)
        adv_t = _fft2(prep.u1 * gxt + prep.u2 * gyt + v1 * prep.dt1 + v2 * prep.dt2)
        dw_ = -np.where(self.bmask, adv_w, 0.0) + self.g * self.ik1 * xt
        dt_ = -np.where(self.bmask, adv_t, 0.0)
        return dw_, dt_

    def tangent(self, prep: PreparedBase, xw: np.ndarray, xt: np.ndarray):
        """One tangent step: M(U) xi."""
        st = self.stepper
        dw_, dt_ = self.drift_direction(prep, xw, xt)
        return st.decay_w * xw + st.gain_w * dw_, st.decay_t * xt + st.gain_t * dt_

    def adjoint(self, prep: PreparedBase, rw: np.ndarray, rt: np.ndarray):
        """One adjoint step: M(U)* rho in the weighted state inner product."""
        st = self.stepper
        aw = st.gain_w * rw
        at = st.gain_t * rt
        pw = _ifft2r(np.where(self.bmask, aw, 0.0))
        pt = _ifft2r(np.where(self.bmask, at, 0.0))
        # transport transpose, block diagonal
        t1w = np.where(self.dmask, -self.ik1 * _fft2(prep.u1 * pw) - self.ik2 * _fft2(prep.u2 * pw), 0.0)
        t1t = np.where(self.dmask, -self.ik1 * _fft2(prep.u1 * pt) - self.ik2 * _fft2(prep.u2 * pt), 0.0)
        # velocity-source transpose, lands in the vorticity slot
        s1 = prep.dw1 * pw + prep.dt1 * pt / self.zeta
        s2 = prep.dw2 * pw + prep.dt2 * pt / self.zeta
        t2w = np.where(self.dmask, np.conj(self.m1) * _fft2(s1) + np.conj(self.m2) * _fft2(s2), 0.0)
        out_w = st.decay_w * rw - t1w - t2w
        out_t = st.decay_t * rt - t1t - self.zeta * self.g * self.ik1 * aw
        return out_w, out_t


def stack_states(states) -> tuple[np.ndarray, np.ndarray]:
    return (np.stack([s.w_hat for s in states]), np.stack([s.theta_hat for s in states]))


def unstack_states(w: np.ndarray, t: np.ndarray) -> list[SpectralState]:
    return [SpectralState(w[i].copy(), t[i].copy()) for i in range(w.shape[0])]


# ---------------------------------------------------------------------------
# forward sweeps


def kick_schedule(path, dt: float, n_steps: int) -> dict[int, int]:
    """Step index -> clock cell whose jump lands at the end of that step."""
    h = path.spec.grid_step
    q = int(round(h / dt))
    if abs(h / dt - q) > 1e-9 or q < 1:
        raise ValueError("step size must divide the clock grid step")
    return {(i + 1) * q - 1: i for i in range(len(path.increments)) if (i + 1) * q - 1 < n_steps}


def flow_with_tangent(u0: SpectralState, n_steps: int, lin: Linearizer,
                      xw: np.ndarray, xt: np.ndarray,
                      kicks: dict[int, int] | None = None,
                      dw: np.ndarray | None = None, model=None,
                      on_step=None, store_base: bool = False):
    """Advance base state and a perturbation stack in lockstep.

    on_step(i, base, xw, xt) is called after step i completes (post kick).
    Returns (base_final, xw, xt, bases) with bases the per-step base states
    (length n_steps + 1) when store_base, else None.
    """
    base = u0.copy()
    bases = [base.copy()] if store_base else None
    basis = model.theta_basis(lin.n) if model is not None else None
    for i in range(n_steps):
        prep = lin.prepare(base)
        xw, xt = lin.tangent(prep, xw, xt)
        base = lin.advance_base(base)
        if kicks and i in kicks:
            row = kicks[i]
            base = SpectralState(base.w_hat,
                                 base.theta_hat + np.tensordot(dw[row], basis, axes=([0], [0])))
        if store_base:
            bases.append(base.copy())
        if on_step is not None:
            on_step(i, base, xw, xt)
    return base, xw, xt, bases


def jacobian_forward(u0: SpectralState, horizon: float, stepper: Stepper,
                     directions, model=None, path=None, dw=None):
    """Propagate perturbations through the flow started at u0.

    Returns the list J_{0,T} xi for xi in directions; the optional noise
    triple freezes a forcing realization into the base path.
    """
    lin = Linearizer(stepper)
    n_steps = int(round(horizon / stepper.dt))
    kicks = kick_schedule(path, stepper.dt, n_steps) if path is not None else None
    xw, xt = stack_states(directions)
    _, xw, xt, _ = flow_with_tangent(u0, n_steps, lin, xw, xt, kicks=kicks, dw=dw, model=model)
    return unstack_states(xw, xt)


def adjoint_backward(bases, stepper: Stepper, terminals, record_at=None):
    """Transport terminal costates backward through a stored base path.

    bases is the list of per-step base states (length n_steps + 1).
    record_at(step_index, rw, rt) is called at loop entry for index j + 1
    (the costate there is K_{t_{j+1}, T}), and once more for index 0.
    Returns the costates at time 0.
    """
    lin = Linearizer(stepper)
    rw, rt = stack_states(terminals)
    n_steps = len(bases) - 1
    for j in range(n_steps - 1, -1, -1):
        if record_at is not None:
            record_at(j + 1, rw, rt)
        prep = lin.prepare(bases[j])
        rw, rt = lin.adjoint(prep, rw, rt)
    if record_at is not None:
        record_at(0, rw, rt)
    return unstack_states(rw, rt)


def second_variation(u0: SpectralState, horizon: float, stepper: Stepper,
                     phi: SpectralState, psi: SpectralState,
                     model=None, path=None, dw=None) -> SpectralState:
    """Second derivative of the discrete flow in the pair (phi, psi).

    Evolves the exact chain rule of the composed steps: the quadratic term
    contributes the constant bilinear form -B(a, b) - B(b, a) sourced by the
    two first variations.
    """
    lin = Linearizer(stepper)
    st = stepper
    n_steps = int(round(horizon / st.dt))
    kicks = kick_schedule(path, st.dt, n_steps) if path is not None else None
    basis = model.theta_basis(lin.n) if model is not None else None

    base = u0.copy()
    xw, xt = stack_states([phi, psi])
    jw = np.zeros_like(u0.w_hat)
    jt = np.zeros_like(u0.theta_hat)
    for i in range(n_steps):
        prep = lin.prepare(base)
        # source from the current first variations
        a = SpectralState(xw[0], xt[0])
        b = SpectralState(xw[1], xt[1])
        src = -(sp.nonlinear_B(a, b) + sp.nonlinear_B(b, a))
        djw, djt = lin.drift_direction(prep, jw, jt)
        jw = st.decay_w * jw + st.gain_w * (djw + src.w_hat)
        jt = st.decay_t * jt + st.gain_t * (djt + src.theta_hat)
        xw, xt = lin.tangent(prep, xw, xt)
        base = lin.advance_base(base)
        if kicks and i in kicks:
            row = kicks[i]
            base = SpectralState(base.w_hat,
                                 base.theta_hat + np.tensordot(dw[row], basis, axes=([0], [0])))
    return SpectralState(jw, jt)


# ---------------------------------------------------------------------------
# projection basis


TWO_PI_SQ = 2.0 * np.pi**2


@dataclass
class HNBasis:
    """Orthonormal trig basis of the finite-dimensional band |k| <= level.

    Elements are temperature-slot (sigma) and vorticity-slot (psi) fields,
    normalized in the weighted state inner product.
    """

    n: int
    level: float
    params: PhysicsParams
    labels: list = field(init=False)
    w_hats: np.ndarray = field(init=False)
    t_hats: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        modes = sp.modes_in_ball(self.level)
        labels = []
        w_list, t_list = [], []
        zero = np.zeros((self.n, self.n), np.complex128)
        s_norm = 1.0 / np.sqrt(TWO_PI_SQ)
        p_norm = 1.0 / np.sqrt(self.params.zeta_star * TWO_PI_SQ)
        for k in modes:
            for m in (0, 1):
                labels.append(("sigma", k, m))
                w_list.append(zero)
                t_list.append(s_norm * sp.trig_hat(self.n, k[0], k[1], m))
        for k in modes:
            for m in (0, 1):
                labels.append(("psi", k, m))
                w_list.append(p_norm * sp.trig_hat(self.n, k[0], k[1], m))
                t_list.append(zero)
        self.labels = labels
        self.w_hats = np.stack(w_list)
        self.t_hats = np.stack(t_list)

    @property
    def dim(self) -> int:
        return len(self.labels)

    def states(self) -> list[SpectralState]:
        return unstack_states(self.w_hats, self.t_hats)

    def coords(self, xw: np.ndarray, xt: np.ndarray) -> np.ndarray:
        """Weighted inner products of a stack (..., n, n) with every element."""
        c = TWO_PI_SQ * 2.0 / self.n**4          # (2 pi)^2 / n^4
        zeta = self.params.zeta_star
        cw = np.einsum("...ij,dij->...d", xw, np.conj(self.w_hats)).real
        ct = np.einsum("...ij,dij->...d", xt, np.conj(self.t_hats)).real
        return c * (zeta * cw + ct)

    def sublevel_mask(self, level: float) -> np.ndarray:
        out = np.zeros(self.dim, dtype=bool)
        for i, (_, k, _) in enumerate(self.labels):
            if k[0] ** 2 + k[1] ** 2 <= level**2 + 1e-9:
                out[i] = True
        return out


# ---------------------------------------------------------------------------
# jump Gramian


@dataclass
class GramianResult:
    matrix: np.ndarray
    basis: HNBasis
    n_jumps: int
    degenerate: bool          # no jump mass in the window
    clock_mass: float


def malliavin_forward(u0: SpectralState, n_steps: int, stepper: Stepper,
                      model, path, dw: np.ndarray, basis: HNBasis) -> GramianResult:
    """Assemble the jump Gramian on the basis band by forward propagation.

    Every clock cell contributes d seeded perturbations sqrt(alpha_j^2 dl)
    sigma_j at its jump time; rows accumulate through the tangent flow and
    the Gramian is the outer-product sum of their band coordinates.
    """
    lin = Linearizer(stepper)
    kicks = kick_schedule(path, stepper.dt, n_steps)
    d = model.dim
    sig = model.theta_basis(lin.n)        # alpha_j already folded in
    n = lin.n

    max_rows = (len(kicks)) * d
    xw = np.zeros((max_rows, n, n), np.complex128)
    xt = np.zeros((max_rows, n, n), np.complex128)
    active = 0
    base = u0.copy()
    n_jumps = 0
    mass = 0.0
    for i in range(n_steps):
        prep = lin.prepare(base)
        if active:
            xw[:active], xt[:active] = lin.tangent(prep, xw[:active], xt[:active])
        base = lin.advance_base(base)
        if i in kicks:
            row = kicks[i]
            dl = path.increments[row]
            base = SpectralState(base.w_hat,
                                 base.theta_hat + np.tensordot(dw[row], sig, axes=([0], [0])))
            if dl > 0.0:
                n_jumps += 1
                mass += dl
                xt[active:active + d] = np.sqrt(dl) * sig
                active += d
    coords = basis.coords(xw[:active], xt[:active]) if active else np.zeros((0, basis.dim))
    matrix = coords.T @ coords
    return GramianResult(matrix=matrix, basis=basis, n_jumps=n_jumps,
                         degenerate=(n_jumps == 0), clock_mass=mass)


def malliavin_backward(bases, stepper: Stepper, model, path,
                       basis: HNBasis) -> GramianResult:
    """Assemble the same Gramian by one adjoint sweep of the basis stack."""
    n_steps = len(bases) - 1
    kicks = kick_schedule(path, stepper.dt, n_steps)
    d = model.dim
    sig = model.theta_basis(stepper.n)
    jump_steps = {i + 1: kicks[i] for i in kicks if path.increments[kicks[i]] > 0.0}
    rows = []
    c = TWO_PI_SQ * 2.0 / stepper.n**4

    def record(idx, rw, rt):
        if idx in jump_steps:
            dl = path.increments[jump_steps[idx]]
            # <K e_a, alpha sigma_j>: temperature slot only, weight 1
            pair = c * np.einsum("aij,dij->da", rt, np.conj(sig)).real
            rows.append(np.sqrt(dl) * pair)

    adjoint_backward(bases, stepper, basis.states(), record_at=record)
    if rows:
        g = np.concatenate(rows, axis=0)      # (jumps * d, dim)
        matrix = g.T @ g
    else:
        matrix = np.zeros((basis.dim, basis.dim))
    n_jumps = len(jump_steps)
    mass = float(sum(path.increments[v] for v in jump_steps.values()))
    return GramianResult(matrix=matrix, basis=basis, n_jumps=n_jumps,
                         degenerate=(n_jumps == 0), clock_mass=mass)


# ---------------------------------------------------------------------------
# constrained smallest eigenvalue


@dataclass
class EigenProbe:
    lower: float              # certified lower bound on the constrained minimum
    upper: float              # value of a feasible candidate
    unconstrained: float
    mu: float
    boundary_gap: float       # | |P v(mu)| - alpha | at the returned mu
    active: bool              # constraint active (unconstrained minimizer infeasible)


def min_eigen_probe(matrix: np.ndarray, p_mask: np.ndarray, alpha: float,
                    tol: float = 1e-3, max_iter: int = 200) -> EigenProbe:
    """Minimize <M phi, phi> over unit phi with |P phi| >= alpha.

    P is the coordinate projection onto p_mask. If the unconstrained minimal
    eigenvector is feasible the problem is closed. Otherwise the minimum sits
    on the boundary |P phi| = alpha; every multiplier mu >= 0 gives the lower
    bound lambda_min(M - mu P) + mu alpha^2, and the multiplier is bisected
    until the eigenvector's P-mass matches alpha within tol. Feasible
    candidates rebalanced onto the boundary supply the matching upper bound,
    which stays informative even when an eigenvalue crossing makes the
    P-mass jump past alpha.
    """
    if not 0.0 < alpha <= 1.0:
        raise ValueError("boundary fraction must sit in (0, 1]")
    if not p_mask.any():
        raise ValueError("empty projection block")
    sym = 0.5 * (matrix + matrix.T)
    p = p_mask.astype(float)
    beta_q = np.sqrt(max(0.0, 1.0 - alpha**2))

    def eig_min(mu):
        shifted = sym - mu * np.diag(p)
        vals, vecs = np.linalg.eigh(shifted)
        v = vecs[:, 0]
        return float(vals[0]), v, float(np.linalg.norm(v * p))

    def rebalance(vp, vq):
        npv, nqv = np.linalg.norm(vp), np.linalg.norm(vq)
        if npv <= 1e-14:
            return None
        cand = (alpha / npv) * vp
        if nqv > 1e-14:
            cand = cand + (beta_q / nqv) * vq
        cand = cand / np.linalg.norm(cand)
        return float(cand @ sym @ cand)

    lam0, v0, pm0 = eig_min(0.0)
    if pm0 >= alpha:
        return EigenProbe(lower=lam0, upper=lam0, unconstrained=lam0,
                          mu=0.0, boundary_gap=0.0, active=False)

    best_lower = lam0          # mu = 0 bound, valid since alpha <= 1
    # grow an upper bracket: large mu pushes the minimizer into the P block
    mu_hi = max(1e-12, abs(float(np.trace(sym))) / sym.shape[0])
    v_hi = None
    for _ in range(200):
        lam, v, pm = eig_min(mu_hi)
        best_lower = max(best_lower, lam + mu_hi * alpha**2)
        if pm >= alpha:
            v_hi = v
            break
        mu_hi *= 2.0
    mu_lo, v_lo = 0.0, v0
    mu, pm = mu_hi, pm0
    for _ in range(max_iter):
        mu = 0.5 * (mu_lo + mu_hi)
        lam, v, pm = eig_min(mu)
        best_lower = max(best_lower, lam + mu * alpha**2)
        if abs(pm - alpha) <= tol:
            break
        if pm < alpha:
            mu_lo, v_lo = mu, v
        else:
            mu_hi, v_hi = mu, v
    lam, v, pm = eig_min(mu)
    best_lower = max(best_lower, lam + mu * alpha**2)

    uppers = []
    cand = rebalance(v * p, v - v * p)
    if cand is not None:
        uppers.append(cand)
    if v_hi is not None and v_lo is not None:
        cand = rebalance(v_hi * p, v_lo - v_lo * p)
        if cand is not None:
            uppers.append(cand)
    upper = min(uppers) if uppers else float("inf")
    return EigenProbe(lower=float(min(best_lower, upper)), upper=float(upper),
                      unconstrained=lam0, mu=float(mu),
                      boundary_gap=float(abs(pm - alpha)), active=True)


# ---------------------------------------------------------------------------
# window control


@dataclass
class ControlWindow:
    rho_out: SpectralState
    base_out: SpectralState
    recursion_residual: float      # relative gap between integrated and closed forms
    v_norm_sq: float               # sum_i dl_i |v_i|^2
    n_jumps: int
    degenerate: bool
    beta: float


def control_window(rho_in: SpectralState, u0: SpectralState, n_steps: int,
                   stepper: Stepper, model, path, dw: np.ndarray,
                   beta: float | None = None, controlled: bool = True) -> ControlWindow:
    """Advance the costate over one window, optionally with Tikhonov control.

    Controlled windows damp rho by the regularized Gramian inversion; the
    result must coincide with beta (M + beta)^{-1} J rho, which is also
    computed (through the same column factorization) as a residual check.
    Free windows transport rho by the plain tangent flow. beta = None picks
    1e-4 of the mean weighted column mass.
    """
    lin = Linearizer(stepper)
    kicks = kick_schedule(path, stepper.dt, n_steps)
    d = model.dim
    sig = model.theta_basis(lin.n)
    n = lin.n
    p = stepper.params
    jump_rows = [kicks[i] for i in sorted(kicks) if path.increments[kicks[i]] > 0.0]
    q = len(jump_rows) * d

    if not controlled or q == 0:
        xw, xt = stack_states([rho_in])
        base, xw, xt, _ = flow_with_tangent(u0, n_steps, lin, xw, xt, kicks=kicks, dw=dw, model=model)
        return ControlWindow(rho_out=SpectralState(xw[0], xt[0]), base_out=base,
                             recursion_residual=0.0, v_norm_sq=0.0,
                             n_jumps=len(jump_rows), degenerate=(q == 0), beta=0.0)

    # propagate rho and all jump columns together
    xw = np.zeros((1 + q, n, n), np.complex128)
    xt = np.zeros((1 + q, n, n), np.complex128)
    xw[0] = rho_in.w_hat
    xt[0] = rho_in.theta_hat
    active = 1
    weights = np.zeros(q)
    base = u0.copy()
    jump_ptr = 0
    for i in range(n_steps):
        prep = lin.prepare(base)
        xw[:active], xt[:active] = lin.tangent(prep, xw[:active], xt[:active])
        base = lin.advance_base(base)
        if i in kicks:
            row = kicks[i]
            dl = path.increments[row]
            base = SpectralState(base.w_hat,
                                 base.theta_hat + np.tensordot(dw[row], sig, axes=([0], [0])))
            if dl > 0.0:
                xt[active:active + d] = sig
                weights[jump_ptr * d:(jump_ptr + 1) * d] = dl
                active += d
                jump_ptr += 1

    y_w, y_t = xw[0], xt[0]                  # J rho
    cw, ct = xw[1:active], xt[1:active]      # columns J_{r_i, t} alpha sigma_j

    c = TWO_PI_SQ * 2.0 / n**4
    zeta = p.zeta_star

    def pair_with_columns(aw, at):
        return c * (zeta * np.einsum("qij,ij->q", np.conj(cw), aw).real
                    + np.einsum("qij,ij->q", np.conj(ct), at).real)

    gram = c * (zeta * np.einsum("qij,rij->qr", cw, np.conj(cw)).real
                + np.einsum("qij,rij->qr", ct, np.conj(ct)).real)
    if beta is None:
        beta = max(1e-300, 1e-4 * float(np.sum(weights * np.diag(gram))) / q)
    rhs = pair_with_columns(y_w, y_t)
    # phi = (beta + C W C*)^{-1} y via the factored identity
    core = np.diag(beta / weights) + gram
    lam = np.linalg.solve(core, rhs)
    phi_w = (y_w - np.tensordot(lam, cw, axes=([0], [0]))) / beta
    phi_t = (y_t - np.tensordot(lam, ct, axes=([0], [0]))) / beta
    v = pair_with_columns(phi_w, phi_t)      # v_{i,j} = <phi, column_{i,j}>

    # integrated costate: J rho - sum_i dl_i sum_j v_{i,j} column_{i,j}
    rho_w = y_w - np.tensordot(weights * v, cw, axes=([0], [0]))
    rho_t = y_t - np.tensordot(weights * v, ct, axes=([0], [0]))
    # closed form: beta (M + beta)^{-1} J rho = beta phi
    close_w = beta * phi_w
    close_t = beta * phi_t
    num = np.sqrt(zeta * np.sum(np.abs(rho_w - close_w) ** 2) + np.sum(np.abs(rho_t - close_t) ** 2))
    den = np.sqrt(zeta * np.sum(np.abs(rho_w) ** 2) + np.sum(np.abs(rho_t) ** 2))
    resid = float(num / max(den, 1e-300))
    v_norm_sq = float(np.sum(weights * v * v))
    return ControlWindow(rho_out=SpectralState(rho_w, rho_t), base_out=base,
                         recursion_residual=resid, v_norm_sq=v_norm_sq,
                         n_jumps=len(jump_rows), degenerate=False, beta=float(beta))


@dataclass
class ControlDecayResult:
    edge_steps: list            # per path: window edges in step units
    rho_norms: np.ndarray       # (n_paths, n_windows + 1) costate norms at edges
    residual_max: float
    v_norm_sq_max: float
    n_degenerate: int           # controlled windows without jump mass


def control_experiment(seed: int, n_paths: int, n_windows: int, n: int,
                       params: PhysicsParams, spec, model, dt: float,
                       kappa: float, amplitude: float = 1.0,
                       beta: float | None = None) -> ControlDecayResult:
    """Alternate controlled and free windows along renewal times of the clock.

    Window edges are the clock-penalized renewal times rounded up to the
    clock grid; even windows apply the Tikhonov control, odd windows run
    free. Records the costate norm at every edge across independent paths.
    """
    from .noise import (ROLE_BROWNIAN, ROLE_CLOCK, ROLE_INIT, ROLE_SCRATCH,
                        rng_stream, sample_subordinator, stopping_times,
                        subordinated_increments)

    h = spec.grid_step
    q = int(round(h / dt))
    if abs(h / dt - q) > 1e-9 or q < 1:
        raise ValueError("step size must divide the clock grid step")
    stepper = Stepper(n, params, DEFAULT_SCHEME, dt)
    horizon_guess = 1.8 * (n_windows + 1) / params.nu
    horizon = h * int(np.ceil(horizon_guess / h))

    edge_steps_all = []
    norms = np.full((n_paths, n_windows + 1), np.nan)
    residual_max = 0.0
    v_max = 0.0
    n_degen = 0
    for i in range(n_paths):
        path = sample_subordinator(spec, horizon, rng_stream(seed, ROLE_CLOCK, i))
        dw = subordinated_increments(path, model.dim, rng_stream(seed, ROLE_BROWNIAN, i))
        etas = stopping_times(path, params.nu, kappa, model.b0, max_count=n_windows + 1)
        if len(etas) < n_windows + 1:
            raise RuntimeError("clock horizon too short for the requested windows")
        edges = [0]
        for eta in etas[:n_windows]:
            cell = int(np.ceil(eta / h - 1e-12))
            edges.append(max(cell, edges[-1] + 1))
        edge_steps = [e * q for e in edges]
        edge_steps_all.append(edge_steps)

        init_rng = rng_stream(seed, ROLE_INIT, i)
        base = sp.random_state(n, init_rng, amplitude=amplitude)
        rho_rng = rng_stream(seed, ROLE_SCRATCH, i)
        rho = sp.random_state(n, rho_rng, amplitude=1.0)
        nrm = sp.weighted_norm(rho, params)
        rho = SpectralState(rho.w_hat / nrm, rho.theta_hat / nrm)
        norms[i, 0] = 1.0
        for w in range(n_windows):
            c0, c1 = edges[w], edges[w + 1]
            sub = type(path)(spec, path.times[c0:c1 + 1] - path.times[c0],
                             path.increments[c0:c1], seed=path.seed)
            res = control_window(rho, base, (c1 - c0) * q, stepper, model, sub,
                                 dw[c0:c1], beta=beta, controlled=(w % 2 == 0))
            if w % 2 == 0 and res.degenerate:
                n_degen += 1
            residual_max = max(residual_max, res.recursion_residual)
            v_max = max(v_max, res.v_norm_sq)
            rho, base = res.rho_out, res.base_out
            norms[i, w + 1] = sp.weighted_norm(rho, params)
    return ControlDecayResult(edge_steps=edge_steps_all, rho_norms=norms,
                              residual_max=residual_max, v_norm_sq_max=v_max,
                              n_degenerate=n_degen)


@dataclass
class GrowthSample:
    sup_gain: float             # sup over the step grid of |J xi|^2 / |xi|^2
    exponent_arg: float         # integral of (|U|_1^{4/3} + 1) dt along the base


def tangent_growth_experiment(seed: int, n_paths: int, horizon: float,
                              stepper: Stepper, spec, model,
                              amplitude: float = 1.0) -> list[GrowthSample]:
    """Growth statistics of the tangent flow along independent noisy paths."""
    from .noise import (ROLE_BROWNIAN, ROLE_CLOCK, ROLE_INIT, ROLE_SCRATCH,
                        rng_stream, sample_subordinator, subordinated_increments)

    p = stepper.params
    n_steps = int(round(horizon / stepper.dt))
    lin = Linearizer(stepper)
    out = []
    for i in range(n_paths):
        clock_horizon = spec.grid_step * int(np.ceil(horizon / spec.grid_step))
        path = sample_subordinator(spec, clock_horizon, rng_stream(seed, ROLE_CLOCK, i))
        dw = subordinated_increments(path, model.dim, rng_stream(seed, ROLE_BROWNIAN, i))
        kicks = kick_schedule(path, stepper.dt, n_steps)
        u0 = sp.random_state(stepper.n, rng_stream(seed, ROLE_INIT, i), amplitude=amplitude)
        # probe the slow band: high modes only dissipate and hide the gain
        xi = sp.random_state(stepper.n, rng_stream(seed, ROLE_SCRATCH, i),
                             decay=1.0, kmax=2)
        nrm = sp.weighted_norm(xi, p)
        xw, xt = stack_states([SpectralState(xi.w_hat / nrm, xi.theta_hat / nrm)])

        sup_gain = 1.0
        arg = [sp.weighted_norm(u0, p, s=1.0) ** (4.0 / 3.0) + 1.0]

        def on_step(j, base, w, t):
            nonlocal sup_gain
            gain = p.zeta_star * sp.sobolev_sq(w[0], 0) + sp.sobolev_sq(t[0], 0)
            sup_gain = max(sup_gain, gain)
            arg.append(sp.weighted_norm(base, p, s=1.0) ** (4.0 / 3.0) + 1.0)

        flow_with_tangent(u0, n_steps, lin, xw, xt, kicks=kicks, dw=dw,
                          model=model, on_step=on_step)
        series = np.asarray(arg)
        integral = float(np.trapezoid(series, dx=stepper.dt))
        out.append(GrowthSample(sup_gain=float(sup_gain), exponent_arg=integral))
    return out


def default_beta(matrix: np.ndarray) -> float:
    """Default Tikhonov level: 1e-4 of the mean diagonal mass."""
    d = matrix.shape[0]
    return max(1e-300, 1e-4 * float(np.trace(matrix)) / d)


# ---------------------------------------------------------------------------
# finite-difference cross checks


def _flow(u0, horizon, stepper, model=None, path=None, dw=None):
    from .stepping import simulate
    traj = simulate(u0, horizon, stepper, model=model, path=path, dw=dw)
    if traj.blew_up:
        raise RuntimeError("base flow left the norm ceiling during a check")
    return traj.final


def jacobian_fd_check(u0: SpectralState, horizon: float, stepper: Stepper,
                      directions, eps: float = 1e-6,
                      model=None, path=None, dw=None) -> float:
    """Largest relative gap between J xi and a one-sided difference quotient."""
    tangents = jacobian_forward(u0, horizon, stepper, directions,
                                model=model, path=path, dw=dw)
    center = _flow(u0, horizon, stepper, model=model, path=path, dw=dw)
    p = stepper.params
    worst = 0.0
    for xi, jx in zip(directions, tangents):
        bumped = SpectralState(u0.w_hat + eps * xi.w_hat, u0.theta_hat + eps * xi.theta_hat)
        shifted = _flow(bumped, horizon, stepper, model=model, path=path, dw=dw)
        fd = SpectralState((shifted.w_hat - center.w_hat) / eps,
                           (shifted.theta_hat - center.theta_hat) / eps)
        gap = sp.weighted_norm(fd - jx, p) / max(sp.weighted_norm(jx, p), 1e-300)
        worst = max(worst, float(gap))
    return worst


def second_variation_fd_check(u0: SpectralState, horizon: float, stepper: Stepper,
                              phi: SpectralState, psi: SpectralState,
                              eps: float = 1e-4, model=None, path=None, dw=None) -> float:
    """Relative gap between the second variation and a mixed second difference."""
    j2 = second_variation(u0, horizon, stepper, phi, psi, model=model, path=path, dw=dw)
    p = stepper.params

    def at(a, b):
        bumped = SpectralState(u0.w_hat + a * phi.w_hat + b * psi.w_hat,
                               u0.theta_hat + a * phi.theta_hat + b * psi.theta_hat)
        return _flow(bumped, horizon, stepper, model=model, path=path, dw=dw)

    fpp = at(eps, eps)
    fp0 = at(eps, 0.0)
    f0p = at(0.0, eps)
    f00 = at(0.0, 0.0)
    fd = SpectralState((fpp.w_hat - fp0.w_hat - f0p.w_hat + f00.w_hat) / eps**2,
                       (fpp.theta_hat - fp0.theta_hat - f0p.theta_hat + f00.theta_hat) / eps**2)
    return float(sp.weighted_norm(fd - j2, p) / max(sp.weighted_norm(j2, p), 1e-300))


def duality_gap(u0: SpectralState, horizon: float, stepper: Stepper,
                xi: SpectralState, phi: SpectralState,
                model=None, path=None, dw=None) -> float:
    """Relative gap of <J xi, phi> against <xi, K phi> on one window."""
    lin = Linearizer(stepper)
    n_steps = int(round(horizon / stepper.dt))
    kicks = kick_schedule(path, stepper.dt, n_steps) if path is not None else None
    xw, xt = stack_states([xi])
    _, xw, xt, bases = flow_with_tangent(u0, n_steps, lin, xw, xt, kicks=kicks,
                                         dw=dw, model=model, store_base=True)
    back = adjoint_backward(bases, stepper, [phi])
    p = stepper.params
    fwd = sp.state_dot(SpectralState(xw[0], xt[0]), phi, p)
    bwd = sp.state_dot(xi, back[0], p)
    scale = max(abs(fwd), abs(bwd), 1e-300)
    return float(abs(fwd - bwd) / scale)


# ---------------------------------------------------------------------------
# spectral-tail coupling


@dataclass
class TailCoupling:
    level: int
    times: np.ndarray
    tail_sq: np.ndarray       # |Q_N J xi|^2, xi seeded in the tail band
    band_sq: np.ndarray       # |P_N J xi|^2, grows from zero


def tail_coupling_series(u0: SpectralState, horizon: float, stepper: Stepper,
                         levels, seed_rng, model=None, path=None, dw=None) -> list[TailCoupling]:
    """Track tail and band energy of tangent vectors seeded beyond each level.

    One unit-norm perturbation per level, supported where |k| > level, is
    propagated along a common base path; the split energies over time are the
    raw material for the dissipation-envelope checks.
    """
    lin = Linearizer(stepper)
    p = stepper.params
    n_steps = int(round(horizon / stepper.dt))
    kicks = kick_schedule(path, stepper.dt, n_steps) if path is not None else None
    seeds = []
    for lv in levels:
        raw = sp.random_state(stepper.n, seed_rng, decay=1.0)
        tail = raw - sp.project_PN(raw, lv)
        nrm = sp.weighted_norm(tail, p)
        if nrm <= 0.0:
            raise ValueError("no tail modes available beyond level %r at n=%d" % (lv, stepper.n))
        seeds.append(SpectralState(tail.w_hat / nrm, tail.theta_hat / nrm))
    xw, xt = stack_states(seeds)
    times = np.empty(n_steps + 1)
    tail_sq = np.empty((len(seeds), n_steps + 1))
    band_sq = np.empty((len(seeds), n_steps + 1))

    def split(j, w, t):
        for a, lv in enumerate(levels):
            band = sp.project_PN(SpectralState(w[a], t[a]), lv)
            tot = p.zeta_star * sp.sobolev_sq(w[a], 0) + sp.sobolev_sq(t[a], 0)
            bnd = sp.weighted_norm(band, p) ** 2
            band_sq[a, j] = bnd
            tail_sq[a, j] = max(tot - bnd, 0.0)

    split(0, xw, xt)
    times[0] = 0.0

    def on_step(i, base, w, t):
        split(i + 1, w, t)
        times[i + 1] = (i + 1) * stepper.dt

    flow_with_tangent(u0, n_steps, lin, xw, xt, kicks=kicks, dw=dw,
                      model=model, on_step=on_step)
    return [TailCoupling(level=int(lv), times=times.copy(),
                         tail_sq=tail_sq[a].copy(), band_sq=band_sq[a].copy())
            for a, lv in enumerate(levels)]


def fit_tail_envelope(series: TailCoupling, nu: float) -> float:
    """Smallest floor constant: max_t (tail(t) - e^{-nu N^2 t}) sqrt(N)."""
    env = np.exp(-nu * series.level**2 * series.times)
    gap = series.tail_sq - env
    return float(max(0.0, gap.max()) * np.sqrt(series.level))


def fit_band_envelope(series: TailCoupling) -> float:
    """Smallest growth constant: max_t band(t) N^{1/4} / (1 + t)."""
    return float((series.band_sq * series.level**0.25 / (1.0 + series.times)).max())


def early_decay_slope(series: TailCoupling, t_cut: float) -> float:
    """Log-linear decay rate of the tail energy over (0, t_cut]."""
    m = (series.times > 0) & (series.times <= t_cut)
    if not m.any():
        raise ValueError("t_cut shorter than one step")
    t = series.times[m]
    q = np.maximum(series.tail_sq[m], 1e-300)
    return float(-(np.log(q[-1]) - np.log(series.tail_sq[0])) / t[-1])


def growth_constant(sup_gain: float, exponent_arg: float, tol: float = 1e-12) -> float:
    """Smallest c with sup_gain <= c e^{c X}: bisection on the monotone map."""
    if sup_gain <= 0.0:
        return 0.0
    lo, hi = 0.0, 1.0
    while hi * np.exp(hi * exponent_arg) < sup_gain:
        hi *= 2.0
        if hi > 1e12:
            return hi
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mid * np.exp(mid * exponent_arg) < sup_gain:
            lo = mid
        else:
            hi = mid
        if hi - lo < tol * max(1.0, hi):
            break
    return hi
