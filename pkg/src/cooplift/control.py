"""Layered wrench control for the lifting team.

Top layer: payload-level force/torque laws (nominal and learning-compensated)
driving the pose errors.  Middle layer: leader-follower allocation of the
commanded wrench onto contact forces, with an internal-force input eta acting
in the grasp-map nullspace.  Bottom layer: per-agent realization of the
commanded contact forces through collective thrust, attitude torque, and
joint torques.  Also: least-squares fitting of the exponential-plus-floor
envelope that bounds the wrench mismatch between layers.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize_scalar, nnls

from . import agent as ag
from .coupled import GRAVITY, InputSet, PayloadParams, PayloadState, TeamParams
from .so3 import attitude_cost, attitude_error, exp_so3, hat, reorthonormalize


# ---------------------------------------------------------------------------
# references, gains, errors


@dataclass(frozen=True)
class RefSample:
    """Payload reference evaluated at one instant."""

    p: np.ndarray
    v: np.ndarray
    a: np.ndarray
    R: np.ndarray
    omega: np.ndarray
    omega_dot: np.ndarray


@dataclass(frozen=True)
class PayloadGains:
    """Diagonal payload gains, stored as the diagonal vectors."""

    Kp: np.ndarray
    Kv: np.ndarray
    KR: np.ndarray
    Kom: np.ndarray


def default_payload_gains(pp: PayloadParams) -> PayloadGains:
    """Position gains 4, velocity 4; attitude gains scaled by tr(J_L)."""
    tr = float(np.trace(pp.inertia))
    return PayloadGains(
        Kp=np.full(3, 4.0),
        Kv=np.full(3, 4.0),
        KR=np.full(3, 8.0 * tr),
        Kom=np.full(3, 2.5 * tr),
    )


@dataclass(frozen=True)
class PayloadErrors:
    e_p: np.ndarray
    e_v: np.ndarray
    e_R: np.ndarray
    e_om: np.ndarray
    Psi: float


def payload_errors(pl: PayloadState, ref: RefSample) -> PayloadErrors:
    """Position, velocity, attitude, and angular-rate errors plus the cost Psi."""
    return PayloadErrors(
        e_p=pl.p - ref.p,
        e_v=pl.v - ref.v,
        e_R=attitude_error(pl.R, ref.R),
        e_om=pl.omega - pl.R.T @ ref.R @ ref.omega,
        Psi=attitude_cost(pl.R, ref.R),
    )


# ---------------------------------------------------------------------------
# payload wrench laws


def _wrench(pl, ref, gains, pp, f_hat_p, f_hat_om, gravity):
    e = payload_errors(pl, ref)
    F = pp.mass * (ref.a - gains.Kp * e.e_p - gains.Kv * e.e_v - gravity)
    if f_hat_p is not None:
        F = F - f_hat_p
    J = pp.inertia
    om = pl.omega
    Q = pl.R.T @ ref.R
    tau = (
        -gains.KR * e.e_R
        - gains.Kom * e.e_om
        + np.cross(om, J @ om)
        - J @ (hat(om) @ Q @ ref.omega - Q @ ref.omega_dot)
    )
    if f_hat_om is not None:
        tau = tau - f_hat_om
    return np.concatenate([F, pl.R @ tau])


def wrench_nominal(
    pl: PayloadState,
    ref: RefSample,
    gains: PayloadGains,
    pp: PayloadParams,
    gravity: np.ndarray = GRAVITY,
) -> np.ndarray:
    """Commanded payload wrench [force; world torque] from the nominal law.

    Substituting the force into the translational dynamics leaves
    vdot = a_ref - Kp e_p - Kv e_v; the torque slot is the body-frame
    attitude law rotated into the world frame.
    """
    return _wrench(pl, ref, gains, pp, None, None, gravity)


def wrench_learning(
    pl: PayloadState,
    ref: RefSample,
    gains: PayloadGains,
    pp: PayloadParams,
    f_hat_p: np.ndarray,
    f_hat_om: np.ndarray,
    gravity: np.ndarray = GRAVITY,
) -> np.ndarray:
    """Nominal wrench minus the predicted payload disturbance means.

    f_hat_p is a world-frame force, f_hat_om a body-frame torque; with both
    zero this reproduces wrench_nominal bit for bit.
    """
    return _wrench(pl, ref, gains, pp, f_hat_p, f_hat_om, gravity)


# ---------------------------------------------------------------------------
# contact-force allocation


class AllocationError(ValueError):
    """Leader grasp block cannot realize arbitrary wrenches."""


@dataclass
class AllocationResult:
    lam: np.ndarray       # (n_contacts, 3) commanded world forces
    basis: np.ndarray     # (3 n_contacts, eta_dim) orthonormal internal basis
    eta_dim: int
    cond: float           # condition number of the leader block
    leaders: tuple


def default_leaders() -> tuple:
    """First agent's contacts plus the second agent's first contact."""
    return (0, 1, 2)


def allocate(
    G: np.ndarray,
    leaders,
    W_cmd: np.ndarray,
    eta: np.ndarray | None = None,
    lam_f0: np.ndarray | None = None,
    internal_basis: str = "follower",
    cond_limit: float = 1e8,
) -> AllocationResult:
    """Split the commanded wrench into leader forces plus internal forces.

    Leaders realize W_cmd through the right pseudoinverse of their grasp
    block; followers carry lam_f0 (zero by default) plus the span of the
    internal basis scaled by eta.  internal_basis selects the basis source:
    "follower" uses ker of the follower block (faithful to the layered
    architecture; empty for a single follower contact), "full" uses ker of
    the whole grasp matrix so eta can exercise every internal direction.
    Either way G @ lam == W_cmd holds identically in eta.
    """
    G = np.asarray(G, dtype=float)
    W_cmd = np.asarray(W_cmd, dtype=float)
    n_c = G.shape[1] // 3
    leaders = tuple(leaders)
    followers = tuple(i for i in range(n_c) if i not in leaders)
    lcols = np.concatenate([np.arange(3 * i, 3 * i + 3) for i in leaders])
    Gl = G[:, lcols]

    U, sv, Vt = np.linalg.svd(Gl, full_matrices=False)
    if sv[-1] <= sv[0] * 1e-10:
        raise AllocationError(
            f"leader grasp block is rank deficient: condition number inf, "
            f"singular values {sv}")
    cond = float(sv[0] / sv[-1])
    if cond > cond_limit:
        raise AllocationError(
            f"leader grasp block is ill conditioned: condition number "
            f"{cond:.3e} exceeds {cond_limit:.1e}, singular values {sv}")

    flat = np.zeros(3 * n_c)
    flat[lcols] = Vt.T @ ((U.T @ W_cmd) / sv)
    if lam_f0 is not None and followers:
        fcols = np.concatenate([np.arange(3 * i, 3 * i + 3) for i in followers])
        flat[fcols] = np.asarray(lam_f0, dtype=float).ravel()

    if internal_basis == "follower":
        if followers:
            fcols = np.concatenate([np.arange(3 * i, 3 * i + 3) for i in followers])
            A = G[:, fcols]
            _, sa, Va = np.linalg.svd(A)
            rank = int((sa > sa[0] * 1e-10).sum()) if sa.size else 0
            Nf = Va[rank:].T
            basis = np.zeros((3 * n_c, Nf.shape[1]))
            basis[fcols] = Nf
        else:
            basis = np.zeros((3 * n_c, 0))
    elif internal_basis == "full":
        _, sa, Va = np.linalg.svd(G)
        rank = int((sa > sa[0] * 1e-10).sum())
        basis = Va[rank:].T
    else:
        raise ValueError(f"unknown internal_basis {internal_basis!r}")

    dim = basis.shape[1]
    if eta is not None:
        eta = np.asarray(eta, dtype=float)
        if eta.shape != (dim,):
            raise ValueError(f"eta has dimension {eta.size}, internal basis has {dim}")
        flat = flat + basis @ eta

    return AllocationResult(
        lam=flat.reshape(n_c, 3), basis=basis, eta_dim=dim, cond=cond,
        leaders=leaders)


def wrench_mismatch(G: np.ndarray, lam_applied: np.ndarray, W_cmd: np.ndarray) -> np.ndarray:
    """Realized-minus-commanded payload wrench, the interface disturbance."""
    return G @ np.asarray(lam_applied, dtype=float).ravel() - W_cmd


# ---------------------------------------------------------------------------
# per-agent realization


@dataclass(frozen=True)
class AgentGains:
    """Attitude and joint loop gains; fast against the payload loop."""

    kR: float = 6.0
    kom: float = 0.6
    kI: float = 0.0
    kp_r: float = 400.0
    kd_r: float = 36.0


@dataclass
class AgentCommand:
    u: float
    tau: np.ndarray
    tau_r: np.ndarray
    R_d: np.ndarray
    F: np.ndarray


def thrust_attitude(F: np.ndarray, yaw: float = 0.0, prev_Rd: np.ndarray | None = None) -> np.ndarray:
    """Desired attitude pointing the thrust axis along F with fixed yaw."""
    nF = np.linalg.norm(F)
    if nF < 1e-9:
        return np.eye(3) if prev_Rd is None else prev_Rd.copy()
    b3 = F / nF
    b1c = np.array([np.cos(yaw), np.sin(yaw), 0.0])
    c = np.cross(b3, b1c)
    nc = np.linalg.norm(c)
    if nc < 1e-6:
        # thrust along the yaw heading: fall back to the orthogonal heading
        b1c = np.array([-np.sin(yaw), np.cos(yaw), 0.0])
        c = np.cross(b3, b1c)
        nc = np.linalg.norm(c)
    b2 = c / nc
    b1 = np.cross(b2, b3)
    return np.column_stack([b1, b2, b3])


def _align_thrust_axis(Rd_base: np.ndarray, F: np.ndarray) -> np.ndarray:
    """Minimal world-frame rotation of Rd_base taking its thrust axis onto F."""
    nF = np.linalg.norm(F)
    if nF < 1e-9:
        return Rd_base.copy()
    b3 = F / nF
    b0 = Rd_base[:, 2]
    axis = np.cross(b0, b3)
    s = float(np.linalg.norm(axis))
    c = float(b0 @ b3)
    if s < 1e-12:
        return Rd_base.copy()
    return exp_so3((np.arctan2(s, c) / s) * axis) @ Rd_base


def realize_agent(
    params: ag.AgentParams,
    state: ag.AgentState,
    lam_cmd: np.ndarray,
    a_ref: np.ndarray,
    gains: AgentGains,
    f_hat=None,
    prev_Rd: np.ndarray | None = None,
    yaw: float = 0.0,
    r_ref: np.ndarray | None = None,
    rdot_ref: np.ndarray | None = None,
    rddot_ref: np.ndarray | None = None,
    omega_d: np.ndarray | None = None,
    omega_d_dot: np.ndarray | None = None,
    Rd_base: np.ndarray | None = None,
    lead_time: float = 0.0,
    att_int: np.ndarray | None = None,
    int_dt: float = 0.0,
    gravity: np.ndarray = GRAVITY,
) -> AgentCommand:
    """Thrust, attitude torque, and joint torques realizing the force command.

    The desired base force is m (a_ref - a_g) plus the commanded contact
    reactions minus the predicted base disturbance; thrust takes its
    component along the current axis (clamped nonnegative), the desired
    attitude rotates the axis onto it.  Torque channels cancel the known
    couplings (momentum drift, thrust coupling, commanded contact loads,
    predicted disturbances) and close PD loops on attitude and joints.

    The optional reference-path arguments refine the realization: Rd_base
    anchors the desired attitude to a grasp-consistent pose (only the
    thrust-axis alignment is corrected, keeping heading and roll on the
    constraint manifold), omega_d / omega_d_dot add attitude-rate tracking
    so a rotating target is followed without steady lag, lead_time aims a
    zero-order-held attitude target at the middle of its hold window, and
    rdot_ref / rddot_ref let the joint servo damp deviations from the
    constraint-consistent joint motion instead of fighting it.
    """
    n = params.n_joints
    m = params.mass
    if f_hat is None:
        fx = np.zeros(3)
        fom = np.zeros(3)
        fr = np.zeros(n)
    else:
        fx, fom, fr = f_hat

    F = m * (np.asarray(a_ref, dtype=float) - gravity) + lam_cmd.sum(axis=0) - fx
    if Rd_base is None:
        R_d = thrust_attitude(F, yaw, prev_Rd)
    else:
        R_d = _align_thrust_axis(Rd_base, F)
    if omega_d is not None and lead_time != 0.0:
        R_d = R_d @ exp_so3(lead_time * omega_d)
    u = float(F @ state.R[:, 2])
    if u < 0.0:
        u = 0.0

    blocks = ag.mass_blocks(params, state.r)
    JcT = ag.contact_jacobians_T(params, state.r, state.R)
    gen = np.einsum("bij,bj->i", JcT, lam_cmd)
    om = state.omega

    e_R = attitude_error(state.R, R_d)
    if omega_d is None:
        e_om = om
        ff_om = np.zeros(3)
    else:
        Q = state.R.T @ R_d
        om_ref = Q @ omega_d
        e_om = om - om_ref
        if omega_d_dot is None:
            ff_om = -blocks.J @ (hat(om) @ om_ref)
        else:
            ff_om = blocks.J @ (Q @ omega_d_dot - hat(om) @ om_ref)
    tau = (
        -gains.kR * e_R
        - gains.kom * e_om
        - np.cross(state.mu, om)
        + ff_om
        + (u / m) * blocks.C[2]
        + gen[:3]
        - fom
    )
    if att_int is not None and gains.kI > 0.0:
        # slow integral state; rejects the sustained torque that contact
        # mismatch exerts through the arms (updated in place by design)
        att_int += int_dt * e_R
        tau = tau - gains.kI * att_int

    if r_ref is None:
        r_ref = state.r
    Mrr = ag.reduced_mass(blocks)[3:, 3:]
    rdot_err = state.rdot if rdot_ref is None else state.rdot - rdot_ref
    acc = -gains.kp_r * (state.r - r_ref) - gains.kd_r * rdot_err
    if rddot_ref is not None:
        acc = acc + rddot_ref
    tau_r = (
        Mrr @ acc
        - ag.quadratic_mass_term(params, state.r, om, state.rdot)
        + (u / m) * blocks.M_v_r[2]
        + gen[3:]
        - fr
    )
    return AgentCommand(u=u, tau=tau, tau_r=tau_r, R_d=R_d, F=F)


def realize_team(
    params: TeamParams,
    state,
    lam_cmd: np.ndarray,
    a_refs,
    gains: AgentGains,
    f_hats=None,
    prev_Rd=None,
    r_refs=None,
    rdot_refs=None,
    rddot_refs=None,
    omega_ds=None,
    omega_d_dots=None,
    Rd_bases=None,
    lead_time: float = 0.0,
    att_ints=None,
    int_dt: float = 0.0,
    yaw: float = 0.0,
):
    """Realize every agent's share of the contact-force command.

    lam_cmd is (n_contacts, 3) in team contact order.  Returns the InputSet
    for the plant plus the per-agent desired attitudes (feed these back as
    prev_Rd to keep the attitude reference continuous through thrust
    reversals).  att_ints, when given, carries the per-agent attitude
    integral states and is updated in place each call.
    """
    lam_cmd = np.asarray(lam_cmd, dtype=float).reshape(-1, 3)
    us, taus, taurs, Rds = [], [], [], []
    k0 = 0
    for j, (a, s) in enumerate(zip(params.agents, state.agents)):
        n = a.n_joints
        cmd = realize_agent(
            a, s, lam_cmd[k0:k0 + n], a_refs[j], gains,
            f_hat=None if f_hats is None else f_hats[j],
            prev_Rd=None if prev_Rd is None else prev_Rd[j],
            yaw=yaw,
            r_ref=None if r_refs is None else r_refs[j],
            rdot_ref=None if rdot_refs is None else rdot_refs[j],
            rddot_ref=None if rddot_refs is None else rddot_refs[j],
            omega_d=None if omega_ds is None else omega_ds[j],
            omega_d_dot=None if omega_d_dots is None else omega_d_dots[j],
            Rd_base=None if Rd_bases is None else Rd_bases[j],
            lead_time=lead_time,
            att_int=None if att_ints is None else att_ints[j],
            int_dt=int_dt,
            gravity=params.gravity,
        )
        us.append(cmd.u)
        taus.append(cmd.tau)
        taurs.append(cmd.tau_r)
        Rds.append(cmd.R_d)
        k0 += n
    return InputSet(u=np.array(us), tau=np.vstack(taus), tau_r=np.vstack(taurs)), Rds


# ---------------------------------------------------------------------------
# payload-only integration (direct wrench injection / exact realization)


def payload_step(
    pp: PayloadParams,
    pl: PayloadState,
    F_world: np.ndarray,
    tau_body: np.ndarray,
    h: float,
    gravity: np.ndarray = GRAVITY,
) -> PayloadState:
    """One RK4 step of the free payload under a held wrench."""
    J = pp.inertia
    m = pp.mass

    def deriv(p, v, R, om):
        vdot = gravity + F_world / m
        omdot = np.linalg.solve(J, tau_body - np.cross(om, J @ om))
        return v, vdot, R @ hat(om), omdot

    p0, v0, R0, om0 = pl.p, pl.v, pl.R, pl.omega
    k1 = deriv(p0, v0, R0, om0)
    k2 = deriv(p0 + 0.5 * h * k1[0], v0 + 0.5 * h * k1[1],
               R0 + 0.5 * h * k1[2], om0 + 0.5 * h * k1[3])
    k3 = deriv(p0 + 0.5 * h * k2[0], v0 + 0.5 * h * k2[1],
               R0 + 0.5 * h * k2[2], om0 + 0.5 * h * k2[3])
    k4 = deriv(p0 + h * k3[0], v0 + h * k3[1], R0 + h * k3[2], om0 + h * k3[3])
    s = h / 6.0
    R1 = R0 + s * (k1[2] + 2.0 * k2[2] + 2.0 * k3[2] + k4[2])
    return PayloadState(
        p=p0 + s * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
        v=v0 + s * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
        R=reorthonormalize(R1),
        omega=om0 + s * (k1[3] + 2.0 * k2[3] + 2.0 * k3[3] + k4[3]),
    )


# ---------------------------------------------------------------------------
# interface-envelope fitting


@dataclass
class InterfaceFit:
    """Constants of the mismatch envelope alpha e^{-gamma dt} |e_lam| + floor."""

    alpha: float
    gamma: float
    theta: float
    kappa: np.ndarray
    violation_fraction: float
    inflation: float
    rms: float


def _envelope_design(times, e_lam, rho, tks, gamma):
    bounds = np.concatenate([[times[0]], tks])
    seg = np.searchsorted(bounds, times, side="right") - 1
    start_idx = np.clip(np.searchsorted(times, bounds), 0, len(times) - 1)
    amp = e_lam[start_idx][seg]
    E = np.exp(-gamma * (times - bounds[seg])) * amp
    return np.column_stack([E, np.ones_like(times), rho])


def fit_interface_constants(
    times,
    dw,
    e_lam,
    rho,
    update_times,
    gamma_bounds=(1e-2, 50.0),
) -> InterfaceFit:
    """Fit (alpha, gamma, theta, kappa) of the wrench-mismatch envelope.

    The envelope restarts at each update time with amplitude |e_lam| sampled
    there and decays toward the floor theta + sum_j kappa_j rho_j(t).  Given
    gamma the model is linear with nonnegative coefficients, so the inner
    problem is NNLS; gamma comes from a log-grid search refined by a bounded
    scalar minimization.  Reports the fraction of samples strictly above the
    fitted envelope and the inflation factor that would cover all of them.
    """
    times = np.asarray(times, dtype=float)
    dw = np.asarray(dw, dtype=float)
    e_lam = np.asarray(e_lam, dtype=float)
    rho = np.zeros((len(times), 0)) if rho is None else np.asarray(rho, dtype=float)
    if rho.ndim == 1:
        rho = rho[:, None]

    if not np.any(np.abs(dw) > 1e-15):
        return InterfaceFit(0.0, 0.0, 0.0, np.zeros(rho.shape[1]), 0.0, 1.0, 0.0)

    tks = np.asarray(
        sorted(t for t in update_times if times[0] < t <= times[-1]), dtype=float)

    def residual(gamma):
        A = _envelope_design(times, e_lam, rho, tks, gamma)
        _, r = nnls(A, dw)
        return r

    grid = np.geomspace(gamma_bounds[0], gamma_bounds[1], 48)
    g0 = grid[int(np.argmin([residual(g) for g in grid]))]
    res = minimize_scalar(
        residual, bounds=(g0 / 3.0, g0 * 3.0), method="bounded",
        options={"xatol": 1e-8})
    gamma = float(res.x) if res.fun <= residual(g0) else float(g0)

    A = _envelope_design(times, e_lam, rho, tks, gamma)
    coef, rnorm = nnls(A, dw)
    env = A @ coef
    over = dw > env + 1e-8 * max(float(np.max(env)), 1e-30)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(env > 1e-15, dw / np.maximum(env, 1e-300), np.inf)
    inflation = float(max(np.max(ratio[np.abs(dw) > 1e-15], initial=1.0), 1.0))
    return InterfaceFit(
        alpha=float(coef[0]),
        gamma=gamma,
        theta=float(coef[1]),
        kappa=coef[2:].copy(),
        violation_fraction=float(np.mean(over)),
        inflation=inflation,
        rms=float(rnorm / np.sqrt(len(times))),
    )
