"""Coupled team dynamics: agents rigidly grasping one payload.

The payload is a rigid body; each agent's arm tips are pinned to body-fixed
attachment points (rigid grasp).  The pin constraints are enforced at the
acceleration level with Baumgarte stabilization; contact forces lambda are the
KKT multipliers, re-solved at every integrator stage.  lambda[j*n+b] is the
world-frame force agent j applies to the payload through arm b; the agent
feels the reaction.

Velocity ordering for constraint algebra: per agent (omega, v, rdot), then
payload (v_L, omega_L).  omega and omega_L are body-frame.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from . import agent as ag
from .so3 import hat, hat_rows, exp_so3, reorthonormalize

GRAVITY = np.array([0.0, 0.0, -9.81])

_EYE3 = np.eye(3)


def _cross3(a, b):
    """Cross product of two 3-vectors without np.cross dispatch overhead."""
    return np.array([
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ])


def _cross_one(w, M):
    """w x row for each row of the (n, 3) array M."""
    out = np.empty_like(M)
    out[:, 0] = w[1] * M[:, 2] - w[2] * M[:, 1]
    out[:, 1] = w[2] * M[:, 0] - w[0] * M[:, 2]
    out[:, 2] = w[0] * M[:, 1] - w[1] * M[:, 0]
    return out


def _cross_rows_sum(a, b):
    """Sum over rows of the row-wise cross product of (n, 3) arrays."""
    return np.array([
        (a[:, 1] * b[:, 2] - a[:, 2] * b[:, 1]).sum(),
        (a[:, 2] * b[:, 0] - a[:, 0] * b[:, 2]).sum(),
        (a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0]).sum(),
    ])


@dataclass(frozen=True)
class PayloadParams:
    mass: float
    inertia: np.ndarray  # 3x3, body frame


@dataclass(frozen=True)
class TeamParams:
    """Payload, agents, and the grasp map between them.

    attachments[j] is an (n_arms, 3) array of payload-frame attachment points;
    agent j's arm b is pinned to attachments[j][b].
    """

    payload: PayloadParams
    agents: tuple[ag.AgentParams, ...]
    attachments: tuple[np.ndarray, ...]
    gravity: np.ndarray = GRAVITY

    @property
    def n_agents(self) -> int:
        return len(self.agents)

    @property
    def n_contacts(self) -> int:
        return sum(a.n_joints for a in self.agents)

    def attachment_stack(self) -> np.ndarray:
        """(n_contacts, 3) payload-frame attachment points in contact order."""
        return np.vstack(self.attachments)


@dataclass
class PayloadState:
    p: np.ndarray
    v: np.ndarray
    R: np.ndarray
    omega: np.ndarray


@dataclass
class CoupledState:
    payload: PayloadState
    agents: list[ag.AgentState]

    def copy(self) -> "CoupledState":
        pl = self.payload
        ags = [
            ag.AgentState(s.R.copy(), s.x.copy(), s.r.copy(), s.omega.copy(),
                          s.v.copy(), s.rdot.copy(), s.mu.copy(), s.nu.copy())
            for s in self.agents
        ]
        return CoupledState(PayloadState(pl.p.copy(), pl.v.copy(), pl.R.copy(), pl.omega.copy()), ags)


@dataclass(frozen=True)
class InputSet:
    """Per-agent actuation: collective thrusts, body torques, joint torques."""

    u: np.ndarray       # (N,)
    tau: np.ndarray     # (N, 3)
    tau_r: np.ndarray   # (N, n_r)


class ZeroDisturbance:
    """No unmodeled forces anywhere."""

    def agent(self, j, state, t):
        return np.zeros(3), np.zeros(3), np.zeros(len(state.r))

    def payload(self, state, t):
        return np.zeros(3), np.zeros(3)


def dimension_audit(params: TeamParams) -> dict:
    """Differential and algebraic dimensions of the coupled DAE."""
    N = params.n_agents
    n_r = params.agents[0].n_joints
    return {
        "differential": 12 * (N + 1) + 2 * N * n_r,
        "algebraic": 3 * params.n_contacts,
        "velocity": sum(6 + a.n_joints for a in params.agents) + 6,
    }


def grasp_matrix(params: TeamParams, R_L: np.ndarray) -> np.ndarray:
    """World-frame grasp map: wrench on the payload = G @ stacked forces."""
    c = params.attachment_stack()
    G = np.zeros((6, 3 * len(c)))
    for k, ck in enumerate(c):
        G[:3, 3 * k:3 * k + 3] = np.eye(3)
        G[3:, 3 * k:3 * k + 3] = hat(R_L @ ck)
    return G


# ---------------------------------------------------------------------------
# constraint algebra


def _velocity_layout(params: TeamParams):
    """Slices of the stacked velocity vector for each agent and the payload."""
    slices = []
    off = 0
    for a in params.agents:
        w = 6 + a.n_joints
        slices.append(slice(off, off + w))
        off += w
    return slices, slice(off, off + 6), off + 6


class _TeamConstants:
    """Configuration-independent pieces of the stage evaluation, cached per params."""

    __slots__ = (
        "starts", "njoints", "contact0", "pl_start", "n_vel", "n_c",
        "inv_mass", "mL", "JL", "Jinv", "att", "hat_att", "gravity",
        "D_tmpl", "M_tmpl",
    )

    def __init__(self, params: TeamParams):
        starts, njs, c0 = [], [], []
        off = 0
        k = 0
        for a in params.agents:
            starts.append(off)
            njs.append(a.n_joints)
            c0.append(k)
            off += 6 + a.n_joints
            k += a.n_joints
        self.starts = starts
        self.njoints = njs
        self.contact0 = c0
        self.pl_start = off
        self.n_vel = off + 6
        self.n_c = k
        self.inv_mass = [1.0 / a.mass for a in params.agents]
        self.mL = params.payload.mass
        self.JL = params.payload.inertia
        self.Jinv = np.linalg.inv(params.payload.inertia)
        self.att = params.attachment_stack()
        self.hat_att = hat_rows(self.att)
        self.gravity = np.asarray(params.gravity, dtype=float)
        # constant identity blocks of D and M^-1 D^T, prefilled once
        D = np.zeros((3 * self.n_c, self.n_vel))
        M = np.zeros((self.n_vel, 3 * self.n_c))
        for j, a in enumerate(params.agents):
            st0, k0, n = self.starts[j], self.contact0[j], a.n_joints
            for b in range(n):
                r0 = 3 * (k0 + b)
                D[r0:r0 + 3, st0 + 3:st0 + 6] = np.eye(3)
                D[r0:r0 + 3, off:off + 3] = -np.eye(3)
                M[st0 + 3:st0 + 6, r0:r0 + 3] = np.eye(3) / a.mass
                M[off:off + 3, r0:r0 + 3] = -np.eye(3) / params.payload.mass
        self.D_tmpl = D
        self.M_tmpl = M


# params objects hold ndarrays and are unhashable; key by id and pin the object
_TEAM_CACHE: dict[int, tuple[TeamParams, _TeamConstants]] = {}


def _team_constants(params: TeamParams) -> _TeamConstants:
    entry = _TEAM_CACHE.get(id(params))
    if entry is not None and entry[0] is params:
        return entry[1]
    if len(_TEAM_CACHE) > 256:
        _TEAM_CACHE.clear()
    tc = _TeamConstants(params)
    _TEAM_CACHE[id(params)] = (params, tc)
    return tc


def constraint_residual(params: TeamParams, state: CoupledState) -> np.ndarray:
    """Stacked gap vector: tip positions minus attachment positions."""
    pl = state.payload
    out = np.zeros(3 * params.n_contacts)
    k = 0
    for j, a in enumerate(params.agents):
        s = state.agents[j]
        tips = ag.contact_points(a, s.r, s.R, s.x)
        for b in range(a.n_joints):
            anchor = pl.p + pl.R @ params.attachments[j][b]
            out[3 * k:3 * k + 3] = tips[b] - anchor
            k += 1
    return out


def constraint_jacobian(params: TeamParams, state: CoupledState) -> np.ndarray:
    """D(Phi) over stacked velocities (per-agent (omega, v, rdot), payload (v_L, omega_L))."""
    slices, pl_slice, n_vel = _velocity_layout(params)
    pl = state.payload
    D = np.zeros((3 * params.n_contacts, n_vel))
    k = 0
    for j, a in enumerate(params.agents):
        s = state.agents[j]
        JcT = ag.contact_jacobians_T(a, s.r, s.R)
        sl = slices[j]
        for b in range(a.n_joints):
            rows = slice(3 * k, 3 * k + 3)
            D[rows, sl.start:sl.start + 3] = JcT[b, :3, :].T
            D[rows, sl.start + 3:sl.start + 6] = np.eye(3)
            D[rows, sl.start + 6:sl.stop] = JcT[b, 3:, :].T
            D[rows, pl_slice.start:pl_slice.start + 3] = -np.eye(3)
            D[rows, pl_slice.start + 3:pl_slice.stop] = pl.R @ hat(params.attachments[j][b])
            k += 1
    return D


def stacked_velocities(params: TeamParams, state: CoupledState) -> np.ndarray:
    slices, pl_slice, n_vel = _velocity_layout(params)
    vel = np.zeros(n_vel)
    for j, sl in enumerate(slices):
        s = state.agents[j]
        vel[sl] = np.concatenate([s.omega, s.v, s.rdot])
    vel[pl_slice] = np.concatenate([state.payload.v, state.payload.omega])
    return vel


def constraint_velocity(params: TeamParams, state: CoupledState) -> np.ndarray:
    """Phi-dot at the current state."""
    return constraint_jacobian(params, state) @ stacked_velocities(params, state)


def constraint_accel_bias(params: TeamParams, state: CoupledState) -> np.ndarray:
    """Velocity-product part of Phi-ddot (the term independent of accelerations)."""
    pl = state.payload
    out = np.zeros(3 * params.n_contacts)
    k = 0
    for j, a in enumerate(params.agents):
        s = state.agents[j]
        rho, drho = ag.contact_offsets(a, s.r)
        m = a.mass
        n = a.n_joints
        s2 = np.zeros((n, 3))
        masses = np.zeros(n)
        for i, arm in enumerate(a.arms):
            _, _, s2[i] = ag.arm_geometry(arm, s.r[i])
            masses[i] = arm.mass
        for b in range(n):
            rho_dot = drho[b] @ s.rdot
            curv = np.zeros(3)
            for kk in range(n):
                d2 = ((1.0 if kk == b else 0.0) - masses[kk] / m) * s2[kk]
                curv += d2 * s.rdot[kk] ** 2
            bias_agent = s.R @ (
                np.cross(s.omega, np.cross(s.omega, rho[b]))
                + 2.0 * np.cross(s.omega, rho_dot)
                + curv
            )
            c = params.attachments[j][b]
            bias_payload = pl.R @ np.cross(pl.omega, np.cross(pl.omega, c))
            out[3 * k:3 * k + 3] = bias_agent - bias_payload
            k += 1
    return out


# ---------------------------------------------------------------------------
# one-pass stage evaluation: multipliers and the full right-hand side


_ZERO_DIST = ZeroDisturbance()


def _eval(params: TeamParams, state: CoupledState, inputs: InputSet, dist, t: float,
          alpha: float, sds=None):
    """Solve the Baumgarte KKT system and form all state derivatives.

    Returns (deriv, lam, info): deriv is (per-agent tuples, payload tuple),
    lam has shape (n_contacts, 3), info carries the multiplier solve residual.
    sds optionally carries precomputed per-agent StageData for the current r.
    """
    if dist is None:
        dist = _ZERO_DIST
    tc = _team_constants(params)
    if sds is None:
        cached = getattr(state, "stage_cache", None)
        if cached is not None and all(
            np.array_equal(sd.r, s.r) for sd, s in zip(cached, state.agents)
        ):
            sds = cached
        else:
            sds = ag.stage_data_team(params.agents, [s.r for s in state.agents])
    pl = state.payload
    R_L = pl.R
    om_L = pl.omega
    n_c = tc.n_c
    ps = tc.pl_start
    grav = tc.gravity

    D = tc.D_tmpl.copy()
    Minv_DT = tc.M_tmpl.copy()
    a0 = np.empty(tc.n_vel)
    vel = np.empty(tc.n_vel)
    phi_rows = np.empty((n_c, 3))
    bias_rows = np.empty((n_c, 3))

    # payload-side pieces shared by every contact
    R_hat_att = np.matmul(R_L, tc.hat_att)                 # (n_c, 3, 3)
    anchors = pl.p + tc.att @ R_L.T
    payload_bias = _cross_one(om_L, _cross_one(om_L, tc.att)) @ R_L.T
    # columns of M^-1 D^T in the payload angular rows: -Jinv hat(c) R_L^T
    pl_om_cols = np.matmul(tc.Jinv, R_hat_att.transpose(0, 2, 1))
    D[:, ps + 3:] = R_hat_att.reshape(3 * n_c, 3)
    Minv_DT[ps + 3:, :] = pl_om_cols.transpose(1, 0, 2).reshape(3, 3 * n_c)

    f_p, f_tau = dist.payload(pl, t)
    pl_torque_free = f_tau - _cross3(om_L, tc.JL @ om_L)
    a0[ps:ps + 3] = grav + f_p / tc.mL
    a0[ps + 3:] = tc.Jinv @ pl_torque_free
    vel[ps:ps + 3] = pl.v
    vel[ps + 3:] = om_L

    pre = []
    for j, a in enumerate(params.agents):
        s = state.agents[j]
        sd = sds[j]
        n = tc.njoints[j]
        st0 = tc.starts[j]
        k0 = tc.contact0[j]
        m_inv = tc.inv_mass[j]
        om = s.omega
        rdot = s.rdot
        xi = np.concatenate([om, rdot])
        blocks = sd.blocks
        f_x, f_om, f_r = dist.agent(j, s, t)
        u_j = inputs.u[j]
        # thrust is e3*u in the body frame: C^T e3 and Mvr^T e3 are single rows
        dMxi = sd.dM @ xi
        g_mu = _cross3(s.mu, om) + inputs.tau[j] - (u_j * m_inv) * blocks.C[2] + f_om
        g_nu = 0.5 * (dMxi @ xi) + inputs.tau_r[j] - (u_j * m_inv) * blocks.M_v_r[2] + f_r
        a_v = grav + (u_j * s.R[:, 2] + f_x) * m_inv
        # Mbar-dot @ xi = sum_k rdot_k dM_k xi reuses the same contraction
        a_red = sd.Minv @ (np.concatenate([g_mu, g_nu]) - rdot @ dMxi)
        a0[st0:st0 + 3] = a_red[:3]
        a0[st0 + 3:st0 + 6] = a_v
        a0[st0 + 6:st0 + 6 + n] = a_red[3:]
        vel[st0:st0 + 3] = om
        vel[st0 + 3:st0 + 6] = s.v
        vel[st0 + 6:st0 + 6 + n] = rdot

        R_j = s.R
        rho = sd.rho
        A = np.matmul(R_j, hat_rows(rho))                 # (n, 3, 3): R hat(rho_b)
        Cm = np.matmul(R_j, sd.drho)                       # (n, 3, n): R drho_b
        phi_rows[k0:k0 + n] = s.x + rho @ R_j.T - anchors[k0:k0 + n]
        rho_dot = np.matmul(sd.drho, rdot)
        curv = (sd.arr.curv_coef * (rdot * rdot)) @ sd.s2
        inner = _cross_one(om, _cross_one(om, rho) + 2.0 * rho_dot) + curv
        bias_rows[k0:k0 + n] = inner @ R_j.T - payload_bias[k0:k0 + n]

        # contact rows for this agent are contiguous: reshape batches the writes
        r0, r1 = 3 * k0, 3 * (k0 + n)
        D[r0:r1, st0:st0 + 3] = (-A).reshape(3 * n, 3)
        D[r0:r1, st0 + 6:st0 + 6 + n] = Cm.reshape(3 * n, n)
        JcT = np.empty((n, 3 + n, 3))
        JcT[:, :3] = (-A).transpose(0, 2, 1)
        JcT[:, 3:] = Cm.transpose(0, 2, 1)
        X = np.matmul(sd.Minv, JcT)                        # (n, 3+n, 3)
        Minv_DT[st0:st0 + 3, r0:r1] = X[:, :3].transpose(1, 0, 2).reshape(3, 3 * n)
        Minv_DT[st0 + 6:st0 + 6 + n, r0:r1] = X[:, 3:].transpose(1, 0, 2).reshape(n, 3 * n)
        pre.append((s, sd, JcT, g_mu, g_nu, a_v, rdot, om, m_inv, n, k0))

    phi = phi_rows.ravel()
    phidot = D @ vel
    bias = bias_rows.ravel()
    # forces on the channels are -D^T lam, so W = D M^-1 D^T is SPD
    W = D @ Minv_DT
    rhs = D @ a0 + bias + (2.0 * alpha) * phidot + (alpha * alpha) * phi
    try:
        lam_flat = np.linalg.solve(W, rhs)
    except np.linalg.LinAlgError:
        lam_flat = np.linalg.lstsq(W, rhs, rcond=None)[0]
    res = float(np.linalg.norm(W @ lam_flat - rhs) / max(1.0, np.linalg.norm(rhs)))
    if res > 1e-10:
        lam_flat = np.linalg.lstsq(W, rhs, rcond=None)[0]
        res = float(np.linalg.norm(W @ lam_flat - rhs) / max(1.0, np.linalg.norm(rhs)))
    lam = lam_flat.reshape(-1, 3)

    # derivatives with the multipliers in place
    d_agents = []
    for s, sd, JcT, g_mu, g_nu, a_v, rdot, om, m_inv, n, k0 in pre:
        lam_j = lam[k0:k0 + n]
        vdot = a_v - m_inv * lam_j.sum(axis=0)
        gen = np.einsum("bij,bj->i", JcT, lam_j)
        d_agents.append((s.R @ hat(om), s.v, vdot, rdot, g_mu - gen[:3], g_nu - gen[3:]))

    lam_sum = lam.sum(axis=0)
    torque = pl_torque_free + _cross_rows_sum(tc.att, lam @ R_L)
    d_payload = (
        pl.v,
        grav + (lam_sum + f_p) / tc.mL,
        R_L @ hat(om_L),
        tc.Jinv @ torque,
    )
    info = {"residual": res, "phi": phi, "phidot": phidot}
    return (d_agents, d_payload), lam, info


def solve_contact_forces(
    params: TeamParams,
    state: CoupledState,
    inputs: InputSet,
    dist=None,
    t: float = 0.0,
    alpha: float = 20.0,
):
    """Baumgarte-stabilized KKT multipliers at the current state."""
    _, lam, info = _eval(params, state, inputs, dist, t, alpha)
    return lam, info


def coupled_rhs(
    params: TeamParams,
    state: CoupledState,
    inputs: InputSet,
    dist=None,
    t: float = 0.0,
    alpha: float = 20.0,
):
    """Full DAE right-hand side; returns (derivative pytree, lam)."""
    deriv, lam, _ = _eval(params, state, inputs, dist, t, alpha)
    return deriv, lam


# ---------------------------------------------------------------------------
# flat packing and the RK4 stepper


def pack(params: TeamParams, state: CoupledState) -> np.ndarray:
    parts = []
    for s in state.agents:
        parts += [s.R.ravel(), s.x, s.v, s.r, s.mu, s.nu]
    pl = state.payload
    parts += [pl.p, pl.v, pl.R.ravel(), pl.omega]
    return np.concatenate(parts)


def _stage_unpack(params: TeamParams, y: np.ndarray, copy: bool = False):
    """Rebuild a state from the flat vector, deriving (omega, rdot) from (mu, nu).

    Returns (state, stage_data_list) so the stage evaluation can reuse the
    per-agent mass data.  Without copy the state holds views into y; callers
    must treat such states as read-only scratch.
    """
    fields = []
    off = 0
    for a in params.agents:
        n = a.n_joints
        R = y[off:off + 9].reshape(3, 3); off += 9
        x = y[off:off + 3]; off += 3
        v = y[off:off + 3]; off += 3
        r = y[off:off + n]; off += n
        mu = y[off:off + 3]; off += 3
        nu = y[off:off + n]; off += n
        fields.append((R, x, v, r, mu, nu))
    sds = ag.stage_data_team(params.agents, [f[3] for f in fields])
    agents = []
    for (R, x, v, r, mu, nu), sd in zip(fields, sds):
        xi = sd.Minv @ np.concatenate([mu, nu])
        if copy:
            R, x, v, r = R.copy(), x.copy(), v.copy(), r.copy()
            mu, nu = mu.copy(), nu.copy()
        agents.append(ag.AgentState(R, x, r, xi[:3], v, xi[3:], mu, nu))
    p = y[off:off + 3]; off += 3
    v = y[off:off + 3]; off += 3
    R = y[off:off + 9].reshape(3, 3); off += 9
    om = y[off:off + 3]
    if copy:
        p, v, R, om = p.copy(), v.copy(), R.copy(), om.copy()
    return CoupledState(PayloadState(p, v, R, om), agents), sds


def unpack(params: TeamParams, y: np.ndarray) -> CoupledState:
    return _stage_unpack(params, y, copy=True)[0]


def _pack_deriv(params: TeamParams, deriv) -> np.ndarray:
    d_agents, d_payload = deriv
    parts = []
    for dR, dx, dv, dr, dmu, dnu in d_agents:
        parts += [dR.ravel(), dx, dv, dr, dmu, dnu]
    parts += [d_payload[0], d_payload[1], d_payload[2].ravel(), d_payload[3]]
    return np.concatenate(parts)


def rk4_step(
    params: TeamParams,
    state: CoupledState,
    inputs: InputSet,
    dist=None,
    t: float = 0.0,
    h: float = 1e-3,
    alpha: float = 20.0,
):
    """One fixed-step RK4 step; multipliers re-solved at every stage.

    Returns (next_state, lam) with lam the stage-1 multiplier matrix.
    """
    y0 = pack(params, state)

    def f(y, tt):
        st, sds = _stage_unpack(params, y)
        deriv, lam, _ = _eval(params, st, inputs, dist, tt, alpha, sds=sds)
        return _pack_deriv(params, deriv), lam

    deriv1, lam1, _ = _eval(params, state, inputs, dist, t, alpha)
    k1 = _pack_deriv(params, deriv1)
    k2, _ = f(y0 + 0.5 * h * k1, t + 0.5 * h)
    k3, _ = f(y0 + 0.5 * h * k2, t + 0.5 * h)
    k4, _ = f(y0 + h * k3, t + h)
    y1 = y0 + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    nxt, sds1 = _stage_unpack(params, y1, copy=True)
    for s in nxt.agents:
        s.R = reorthonormalize(s.R)
    nxt.payload.R = reorthonormalize(nxt.payload.R)
    # reorthonormalization leaves r untouched, so the next step's first stage
    # can reuse this mass data (guarded by an r comparison in _eval)
    nxt.stage_cache = sds1
    return nxt, lam1


# ---------------------------------------------------------------------------
# consistent initialization and manifold projection


def _agent_position_solve(a, attach_world, R0, x0, r0, max_iter=50, tol=1e-12):
    """Gauss-Newton least-norm solve of tip positions onto the anchors."""
    R, x, r = R0.copy(), x0.copy(), r0.copy()
    n = a.n_joints
    for _ in range(max_iter):
        tips = ag.contact_points(a, r, R, x)
        res = (tips - attach_world).ravel()
        if np.linalg.norm(res) < tol:
            break
        JcT = ag.contact_jacobians_T(a, r, R)
        Jac = np.zeros((3 * n, 6 + n))
        for b in range(n):
            Jac[3 * b:3 * b + 3, :3] = JcT[b, :3, :].T
            Jac[3 * b:3 * b + 3, 3:6] = np.eye(3)
            Jac[3 * b:3 * b + 3, 6:] = JcT[b, 3:, :].T
        step = np.linalg.lstsq(Jac, -res, rcond=None)[0]
        R = R @ exp_so3(step[:3])
        x = x + step[3:6]
        r = r + step[6:]
    final = float(np.linalg.norm((ag.contact_points(a, r, R, x) - attach_world).ravel()))
    return R, x, r, final


def _agent_velocity_solve(a, R, r, anchor_vel, warm=None):
    """Least-norm (omega, v, rdot) with tip velocities matching the anchors."""
    n = a.n_joints
    JcT = ag.contact_jacobians_T(a, r, R)
    A = np.zeros((3 * n, 6 + n))
    for b in range(n):
        A[3 * b:3 * b + 3, :3] = JcT[b, :3, :].T
        A[3 * b:3 * b + 3, 3:6] = np.eye(3)
        A[3 * b:3 * b + 3, 6:] = JcT[b, 3:, :].T
    if warm is None:
        vel = np.linalg.lstsq(A, anchor_vel.ravel(), rcond=None)[0]
    else:
        corr = np.linalg.lstsq(A, anchor_vel.ravel() - A @ warm, rcond=None)[0]
        vel = warm + corr
    return vel[:3], vel[3:6], vel[6:]


def consistent_init(
    params: TeamParams,
    payload: PayloadState,
    attitude_guess: np.ndarray | None = None,
    joint_guess: np.ndarray | None = None,
) -> CoupledState:
    """Build a constraint-consistent team state around a given payload state.

    Agent poses and joint angles come from a Gauss-Newton solve of the grasp
    constraints; velocities from the least-norm solve of Phi-dot = 0 given the
    payload velocity.  Raises RuntimeError if the position solve stalls.
    """
    agents = []
    for j, a in enumerate(params.agents):
        anchors = payload.p + params.attachments[j] @ payload.R.T
        R0 = np.eye(3) if attitude_guess is None else attitude_guess.copy()
        # start above the anchor centroid, arms at the rest angle
        x0 = anchors.mean(axis=0) + np.array([0.0, 0.0, 0.8 * a.arms[0].length])
        r0 = np.zeros(a.n_joints) if joint_guess is None else joint_guess.copy()
        R, x, r, res = _agent_position_solve(a, anchors, R0, x0, r0)
        if res > 1e-10:
            raise RuntimeError(f"consistent_init: agent {j} position solve residual {res:.2e}")
        anchor_vel = payload.v + np.cross(payload.omega, params.attachments[j]) @ payload.R.T
        om, v, rdot = _agent_velocity_solve(a, R, r, anchor_vel)
        agents.append(ag.AgentState.from_velocities(a, R, x, r, om, v, rdot))
    return CoupledState(
        PayloadState(payload.p.copy(), payload.v.copy(), payload.R.copy(), payload.omega.copy()),
        agents,
    )


def project_constraints(params: TeamParams, state: CoupledState) -> CoupledState:
    """Pull agent positions and velocities back onto the constraint manifold."""
    pl = state.payload
    out = state.copy()
    for j, a in enumerate(params.agents):
        s = out.agents[j]
        anchors = pl.p + params.attachments[j] @ pl.R.T
        R, x, r, _ = _agent_position_solve(a, anchors, s.R, s.x, s.r, max_iter=5)
        anchor_vel = pl.v + np.cross(pl.omega, params.attachments[j]) @ pl.R.T
        warm = np.concatenate([s.omega, s.v, s.rdot])
        om, v, rdot = _agent_velocity_solve(a, R, r, anchor_vel, warm=warm)
        out.agents[j] = ag.AgentState.from_velocities(a, R, x, r, om, v, rdot)
    return out


# ---------------------------------------------------------------------------
# energies (used by conservation tests)


def total_energy(params: TeamParams, state: CoupledState) -> float:
    """Kinetic plus gravitational potential energy of the whole team."""
    E = 0.0
    for j, a in enumerate(params.agents):
        s = state.agents[j]
        E += ag.kinetic_energy(a, s) - a.mass * (params.gravity @ s.x)
    pl = state.payload
    E += 0.5 * params.payload.mass * (pl.v @ pl.v)
    E += 0.5 * pl.omega @ params.payload.inertia @ pl.omega
    E -= params.payload.mass * (params.gravity @ pl.p)
    return E
