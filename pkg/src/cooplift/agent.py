"""Reduced dynamics of a thrust-propelled base carrying revolute point-mass arms.

The base is a rigid body with body-fixed single-revolute arms, each ending in a
point mass on a rigid link.  Grouping velocities as (omega, v, rdot) and
expressing the translational channel at the instantaneous center of mass makes
the mass matrix block-diagonal: an exact CoM equation m*a = m*a_g + R e3 u + f
plus a reduced matrix Mbar(r) over (omega, rdot).  The rotational and joint
channels evolve through momentum variables (mu, nu) = Mbar(r) @ (omega, rdot):

    mu_dot = mu x omega + tau - C^T e3 u / m + f_omega - sum_b (Jc_b^T lam_b)[:3]
    nu_dot = 0.5 xi^T dMbar/dr xi + tau_r - Mvr^T e3 u / m + f_r - sum_b (...)[3:]

Gravity only enters the CoM equation; in CoM coordinates it exerts no
generalized force on (omega, r).  All mass-matrix blocks depend on r alone
because the translational velocity inside the blocks is body-frame.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .so3 import hat, hat_rows

E3 = np.array([0.0, 0.0, 1.0])


@dataclass(frozen=True)
class ArmParams:
    """One revolute arm: mount offset, joint axis, rest direction, link."""

    mount: np.ndarray
    axis: np.ndarray
    rest_dir: np.ndarray
    length: float
    mass: float


@dataclass(frozen=True)
class AgentParams:
    base_mass: float
    base_inertia: np.ndarray
    arms: tuple[ArmParams, ...]

    @property
    def mass(self) -> float:
        """Total mass of base plus arm point masses."""
        return self.base_mass + sum(a.mass for a in self.arms)

    @property
    def n_joints(self) -> int:
        return len(self.arms)


@dataclass(frozen=True)
class MassBlocks:
    """Blocks of the configuration-dependent mass matrix over (omega, v, rdot)."""

    J: np.ndarray       # 3x3 rotational block
    C: np.ndarray       # 3x3 translation-rotation coupling (row block of v)
    M_om_r: np.ndarray  # 3xn rotation-joint coupling
    M_v_r: np.ndarray   # 3xn translation-joint coupling
    M_rr: np.ndarray    # nxn joint block
    mass: float


def _cross_rows(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Elementwise cross product over the last axis of broadcastable (..., 3) arrays."""
    out = np.empty(np.broadcast_shapes(a.shape, b.shape))
    out[..., 0] = a[..., 1] * b[..., 2] - a[..., 2] * b[..., 1]
    out[..., 1] = a[..., 2] * b[..., 0] - a[..., 0] * b[..., 2]
    out[..., 2] = a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0]
    return out


def arm_geometry(arm: ArmParams, r: float) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Body-frame point-mass position s and its first two joint derivatives."""
    a = arm.axis
    ca, sa = np.cos(r), np.sin(r)
    d0 = arm.rest_dir
    # Rodrigues rotation of the rest direction about the joint axis
    d = ca * d0 + sa * np.cross(a, d0) + (1.0 - ca) * a * (a @ d0)
    d1 = np.cross(a, d)
    d2 = np.cross(a, d1)
    s = arm.mount + arm.length * d
    return s, arm.length * d1, arm.length * d2


class _ArmArrays:
    """Per-parameter constants stacked over arms for vectorized evaluation."""

    __slots__ = (
        "mounts", "axes", "rest", "cross_ad0", "axis_dot_d0",
        "lengths", "masses", "total_mass", "curv_coef",
    )

    def __init__(self, params: "AgentParams"):
        self.mounts = np.array([a.mount for a in params.arms], dtype=float).reshape(-1, 3)
        self.axes = np.array([a.axis for a in params.arms], dtype=float).reshape(-1, 3)
        self.rest = np.array([a.rest_dir for a in params.arms], dtype=float).reshape(-1, 3)
        self.cross_ad0 = _cross_rows(self.axes, self.rest)
        self.axis_dot_d0 = np.einsum("ij,ij->i", self.axes, self.rest)
        self.lengths = np.array([a.length for a in params.arms], dtype=float)
        self.masses = np.array([a.mass for a in params.arms], dtype=float)
        self.total_mass = params.base_mass + float(self.masses.sum())
        n = len(params.arms)
        # d2 rho_b / d r_k^2 = curv_coef[b, k] * s2_k
        self.curv_coef = np.eye(n) - np.tile(self.masses / self.total_mass, (n, 1))


# params objects are unhashable (ndarray fields), so key by id and pin the
# object so a recycled id can never alias a different parameter set
_ARM_CACHE: dict[int, tuple["AgentParams", _ArmArrays]] = {}


def _arm_arrays(params: "AgentParams") -> _ArmArrays:
    entry = _ARM_CACHE.get(id(params))
    if entry is not None and entry[0] is params:
        return entry[1]
    if len(_ARM_CACHE) > 512:
        _ARM_CACHE.clear()
    arr = _ArmArrays(params)
    _ARM_CACHE[id(params)] = (params, arr)
    return arr


def _geometry(params: "AgentParams", r: np.ndarray):
    """Vectorized arm geometry: s, s', s'' with shape r.shape + (3,).

    The trailing axis of r indexes the arms; leading axes (if any) batch over
    independent configurations of the same parameter set.
    """
    arr = _arm_arrays(params)
    ca = np.cos(r)[..., None]
    sa = np.sin(r)[..., None]
    d = ca * arr.rest + sa * arr.cross_ad0 + (1.0 - ca) * arr.axes * arr.axis_dot_d0[:, None]
    d1 = _cross_rows(arr.axes, d)
    d2 = _cross_rows(arr.axes, d1)
    L = arr.lengths[:, None]
    return arr.mounts + L * d, L * d1, L * d2


_EYE3 = np.eye(3)


def _blocks_from_geometry(
    params: AgentParams, s: np.ndarray, s1: np.ndarray
) -> MassBlocks:
    arr = _arm_arrays(params)
    w = arr.masses
    ws = w[:, None] * s
    w_static = ws.sum(axis=0)
    J = params.base_inertia + float(w @ np.einsum("bi,bi->b", s, s)) * _EYE3 - s.T @ ws
    C = -hat(w_static)
    M_om_r = _cross_rows(s, s1).T * w
    M_v_r = s1.T * w
    M_rr = np.diag(w * np.einsum("bi,bi->b", s1, s1))
    return MassBlocks(J, C, M_om_r, M_v_r, M_rr, arr.total_mass)


def mass_blocks(params: AgentParams, r: np.ndarray) -> MassBlocks:
    """Mass-matrix blocks at joint configuration r (all body-frame)."""
    s, s1, _ = _geometry(params, np.asarray(r, dtype=float))
    return _blocks_from_geometry(params, s, s1)


def full_mass_matrix(blocks: MassBlocks) -> np.ndarray:
    """Assemble the (6+n)x(6+n) matrix over stacked (omega, v, rdot)."""
    n = blocks.M_rr.shape[0]
    M = np.zeros((6 + n, 6 + n))
    M[:3, :3] = blocks.J
    M[:3, 3:6] = blocks.C.T
    M[3:6, :3] = blocks.C
    M[3:6, 3:6] = blocks.mass * np.eye(3)
    M[:3, 6:] = blocks.M_om_r
    M[6:, :3] = blocks.M_om_r.T
    M[3:6, 6:] = blocks.M_v_r
    M[6:, 3:6] = blocks.M_v_r.T
    M[6:, 6:] = blocks.M_rr
    return M


def reduced_mass(blocks: MassBlocks) -> np.ndarray:
    """Schur complement of the translational block: Mbar over (omega, rdot)."""
    n = blocks.M_rr.shape[0]
    Mbar = np.empty((3 + n, 3 + n))
    Mbar[:3, :3] = blocks.J
    Mbar[:3, 3:] = blocks.M_om_r
    Mbar[3:, :3] = blocks.M_om_r.T
    Mbar[3:, 3:] = blocks.M_rr
    Q = np.hstack([blocks.C, blocks.M_v_r])
    Mbar -= (Q.T @ Q) / blocks.mass
    return Mbar


def com_offset(params: AgentParams, r: np.ndarray) -> np.ndarray:
    """Body-frame offset of the total CoM from the base reference point."""
    arr = _arm_arrays(params)
    s, _, _ = _geometry(params, np.asarray(r, dtype=float))
    return (arr.masses[:, None] * s).sum(axis=0) / arr.total_mass


def com_shift_velocity(
    blocks: MassBlocks, omega: np.ndarray, rdot: np.ndarray, v0: np.ndarray
) -> np.ndarray:
    """CoM velocity from base velocity v0; all arguments in one common frame."""
    return v0 + (blocks.C @ omega + blocks.M_v_r @ rdot) / blocks.mass


_IDX3 = np.arange(3)


def _d_reduced_from_geometry(
    params: AgentParams,
    blocks: MassBlocks,
    s: np.ndarray,
    s1: np.ndarray,
    s2: np.ndarray,
) -> np.ndarray:
    arr = _arm_arrays(params)
    n = s.shape[0]
    m = blocks.mass
    w = arr.masses
    idx = np.arange(n)
    Q = np.hstack([blocks.C, blocks.M_v_r])
    s_dot_s1 = np.einsum("bi,bi->b", s, s1)
    cross_col = w[:, None] * _cross_rows(s, s2)
    s1_dot_s2 = np.einsum("bi,bi->b", s1, s2)
    outer = s1[:, :, None] * s[:, None, :]
    out = np.zeros((n, 3 + n, 3 + n))
    out[:, :3, :3] = w[:, None, None] * (
        2.0 * s_dot_s1[:, None, None] * _EYE3 - outer - outer.transpose(0, 2, 1)
    )
    out[idx[:, None], _IDX3[None, :], (3 + idx)[:, None]] = cross_col
    out[idx[:, None], (3 + idx)[:, None], _IDX3[None, :]] = cross_col
    out[idx, 3 + idx, 3 + idx] = 2.0 * w * s1_dot_s2
    dQ = np.zeros((n, 3, 3 + n))
    dQ[:, :, :3] = -w[:, None, None] * hat_rows(s1)
    dQ[idx[:, None], _IDX3[None, :], (3 + idx)[:, None]] = w[:, None] * s2
    term = np.matmul(dQ.transpose(0, 2, 1), Q)
    out -= (term + term.transpose(0, 2, 1)) / m
    return out


def d_reduced_mass(params: AgentParams, r: np.ndarray) -> np.ndarray:
    """Analytic dMbar/dr_k, shape (n, 3+n, 3+n)."""
    s, s1, s2 = _geometry(params, np.asarray(r, dtype=float))
    blocks = _blocks_from_geometry(params, s, s1)
    return _d_reduced_from_geometry(params, blocks, s, s1, s2)


def d_reduced_mass_fd(params: AgentParams, r: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central-difference fallback for dMbar/dr_k."""
    n = params.n_joints
    out = np.zeros((n, 3 + n, 3 + n))
    for k in range(n):
        rp, rm = r.copy(), r.copy()
        rp[k] += h
        rm[k] -= h
        out[k] = (reduced_mass(mass_blocks(params, rp)) - reduced_mass(mass_blocks(params, rm))) / (2.0 * h)
    return out


def quadratic_mass_term(
    params: AgentParams, r: np.ndarray, omega: np.ndarray, rdot: np.ndarray
) -> np.ndarray:
    """Generalized inertial force on the joint channel, 0.5 xi^T dMbar/dr_k xi."""
    xi = np.concatenate([omega, rdot])
    dM = d_reduced_mass(params, r)
    return 0.5 * np.einsum("i,kij,j->k", xi, dM, xi)


def _offsets_from_geometry(
    params: AgentParams, s: np.ndarray, s1: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    arr = _arm_arrays(params)
    n = s.shape[0]
    m = arr.total_mass
    c_off = (arr.masses[:, None] * s).sum(axis=0) / m
    rho = s - c_off
    drho = np.tile((-(arr.masses / m))[None, None, :] * s1.T[None, :, :], (n, 1, 1))
    for b in range(n):
        drho[b, :, b] += s1[b]
    return rho, drho


def contact_offsets(params: AgentParams, r: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Body-frame contact offsets rho_b from the CoM and their joint Jacobians.

    Returns (rho, drho) with rho of shape (n_arms, 3) and drho of shape
    (n_arms, 3, n_joints); drho[b, :, k] = d rho_b / d r_k.  The CoM shift
    makes every rho_b depend on every joint angle.
    """
    s, s1, _ = _geometry(params, np.asarray(r, dtype=float))
    return _offsets_from_geometry(params, s, s1)


def contact_points(params: AgentParams, r: np.ndarray, R: np.ndarray, x: np.ndarray) -> np.ndarray:
    """World positions of the arm tips; x is the agent CoM."""
    rho, _ = contact_offsets(params, r)
    return x + rho @ R.T


def contact_jacobians_T(params: AgentParams, r: np.ndarray, R: np.ndarray) -> np.ndarray:
    """Transposed contact Jacobians, shape (n_arms, 3+n, 3).

    Row blocks map a world-frame force at the tip into generalized forces on
    (omega, rdot); the translational channel receives the force directly.  The
    tip velocity is v + Jc_b @ (omega, rdot) with Jc_b = [-R hat(rho_b), R drho_b].
    """
    n = params.n_joints
    rho, drho = contact_offsets(params, r)
    out = np.zeros((n, 3 + n, 3))
    for b in range(n):
        out[b, :3, :] = hat(rho[b]) @ R.T
        out[b, 3:, :] = drho[b].T @ R.T
    return out


def contact_velocities(
    params: AgentParams,
    r: np.ndarray,
    R: np.ndarray,
    omega: np.ndarray,
    v: np.ndarray,
    rdot: np.ndarray,
) -> np.ndarray:
    """World velocities of the arm tips."""
    rho, drho = contact_offsets(params, r)
    out = np.zeros((params.n_joints, 3))
    for b in range(params.n_joints):
        out[b] = v + R @ (np.cross(omega, rho[b]) + drho[b] @ rdot)
    return out


@dataclass
class AgentState:
    """State of one agent; x and v refer to the total CoM (world frame)."""

    R: np.ndarray
    x: np.ndarray
    r: np.ndarray
    omega: np.ndarray
    v: np.ndarray
    rdot: np.ndarray
    mu: np.ndarray
    nu: np.ndarray

    @classmethod
    def from_velocities(
        cls,
        params: AgentParams,
        R: np.ndarray,
        x: np.ndarray,
        r: np.ndarray,
        omega: np.ndarray,
        v: np.ndarray,
        rdot: np.ndarray,
    ) -> "AgentState":
        """Build a state with momenta consistent with the given velocities."""
        Mbar = reduced_mass(mass_blocks(params, r))
        p = Mbar @ np.concatenate([omega, rdot])
        return cls(R.copy(), x.copy(), r.copy(), omega.copy(), v.copy(), rdot.copy(), p[:3], p[3:])

    def momentum_residual(self, params: AgentParams) -> float:
        """Norm of (mu, nu) - Mbar(r) (omega, rdot); zero for a consistent state."""
        Mbar = reduced_mass(mass_blocks(params, self.r))
        p = Mbar @ np.concatenate([self.omega, self.rdot])
        return float(np.linalg.norm(np.concatenate([self.mu, self.nu]) - p))


def velocities_from_momenta(
    params: AgentParams, r: np.ndarray, mu: np.ndarray, nu: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Recover (omega, rdot) = Mbar(r)^-1 (mu, nu)."""
    Mbar = reduced_mass(mass_blocks(params, r))
    xi = np.linalg.solve(Mbar, np.concatenate([mu, nu]))
    return xi[:3], xi[3:]


class StageData:
    """All configuration-dependent quantities one integration stage needs.

    Built in a single geometry pass so the coupled right-hand side touches
    the trigonometry and mass assembly exactly once per agent per stage.
    """

    __slots__ = ("r", "arr", "blocks", "Mbar", "Minv", "dM", "rho", "drho", "s2")

    def __init__(self, params: AgentParams, r: np.ndarray):
        s, s1, s2 = _geometry(params, r)
        self.r = np.array(r)
        self.arr = _arm_arrays(params)
        self.blocks = _blocks_from_geometry(params, s, s1)
        self.Mbar = reduced_mass(self.blocks)
        self.Minv = np.linalg.inv(self.Mbar)
        self.dM = _d_reduced_from_geometry(params, self.blocks, s, s1, s2)
        self.rho, self.drho = _offsets_from_geometry(params, s, s1)
        self.s2 = s2


def stage_data(params: AgentParams, r: np.ndarray) -> StageData:
    return StageData(params, np.asarray(r, dtype=float))


def stage_data_team(params_list, rs) -> list:
    """StageData for several agents at once.

    When every agent shares one AgentParams object, the geometry, mass blocks,
    inverses, and mass-matrix derivatives are batched over agents in single
    numpy calls; otherwise this falls back to per-agent construction.
    """
    p0 = params_list[0]
    if any(p is not p0 for p in params_list[1:]):
        return [StageData(p, np.asarray(r, dtype=float)) for p, r in zip(params_list, rs)]
    arr = _arm_arrays(p0)
    n = len(arr.masses)
    N = len(params_list)
    r_all = np.array(rs, dtype=float).reshape(N, n)
    s, s1, s2 = _geometry(p0, r_all)
    w = arr.masses
    m = arr.total_mass
    idx = np.arange(n)

    scale = (s * s).sum(-1) @ w
    J = p0.base_inertia + scale[:, None, None] * _EYE3 - np.einsum("b,abi,abj->aij", w, s, s)
    w_static = np.einsum("b,abi->ai", w, s)
    C = -hat_rows(w_static)
    M_om_r = (_cross_rows(s, s1) * w[:, None]).transpose(0, 2, 1)
    M_v_r = (s1 * w[:, None]).transpose(0, 2, 1)
    M_rr = np.zeros((N, n, n))
    M_rr[:, idx, idx] = w * (s1 * s1).sum(-1)

    Mbar = np.empty((N, 3 + n, 3 + n))
    Mbar[:, :3, :3] = J
    Mbar[:, :3, 3:] = M_om_r
    Mbar[:, 3:, :3] = M_om_r.transpose(0, 2, 1)
    Mbar[:, 3:, 3:] = M_rr
    Q = np.concatenate([C, M_v_r], axis=2)
    Mbar -= np.matmul(Q.transpose(0, 2, 1), Q) / m
    Minv = np.linalg.inv(Mbar)

    s_dot_s1 = (s * s1).sum(-1)
    cross_col = w[:, None] * _cross_rows(s, s2)
    outer = s1[..., :, None] * s[..., None, :]
    dM = np.zeros((N, n, 3 + n, 3 + n))
    dM[:, :, :3, :3] = w[:, None, None] * (
        2.0 * s_dot_s1[..., None, None] * _EYE3 - outer - outer.transpose(0, 1, 3, 2)
    )
    dM[:, idx[:, None], _IDX3[None, :], (3 + idx)[:, None]] = cross_col
    dM[:, idx[:, None], (3 + idx)[:, None], _IDX3[None, :]] = cross_col
    dM[:, idx, 3 + idx, 3 + idx] = 2.0 * w * (s1 * s2).sum(-1)
    dQ = np.zeros((N, n, 3, 3 + n))
    dQ[..., :3] = -w[:, None, None] * hat_rows(s1)
    dQ[:, idx[:, None], _IDX3[None, :], (3 + idx)[:, None]] = w[:, None] * s2
    term = np.matmul(dQ.transpose(0, 1, 3, 2), Q[:, None])
    dM -= (term + term.transpose(0, 1, 3, 2)) / m

    rho = s - (w_static / m)[:, None]
    drho = np.tile((s1.transpose(0, 2, 1) * (-(w / m)))[:, None], (1, n, 1, 1))
    for b in range(n):
        drho[:, b, :, b] += s1[:, b]

    out = []
    for a_i in range(N):
        sd = StageData.__new__(StageData)
        sd.r = r_all[a_i].copy()
        sd.arr = arr
        sd.blocks = MassBlocks(J[a_i], C[a_i], M_om_r[a_i], M_v_r[a_i], M_rr[a_i], m)
        sd.Mbar = Mbar[a_i]
        sd.Minv = Minv[a_i]
        sd.dM = dM[a_i]
        sd.rho = rho[a_i]
        sd.drho = drho[a_i]
        sd.s2 = s2[a_i]
        out.append(sd)
    return out


def agent_rhs(
    params: AgentParams,
    state: AgentState,
    u: float,
    tau: np.ndarray,
    tau_r: np.ndarray,
    a_g: np.ndarray,
    f_x: np.ndarray | None = None,
    f_om: np.ndarray | None = None,
    f_r: np.ndarray | None = None,
    lam: np.ndarray | None = None,
):
    """Time derivative of (R, x, v, r, mu, nu) under thrust, torques, and contacts.

    lam stacks the world-frame forces the agent applies at its arm tips,
    shape (n_arms, 3); the agent feels the reactions.  Disturbance forces
    default to zero.  Returns (Rdot, xdot, vdot, rdot, mudot, nudot).
    """
    n = params.n_joints
    blocks = mass_blocks(params, state.r)
    m = blocks.mass
    thrust_body = E3 * u
    Rdot = state.R @ hat(state.omega)
    vdot = a_g + (state.R @ thrust_body) / m
    if f_x is not None:
        vdot = vdot + f_x / m
    mudot = np.cross(state.mu, state.omega) + tau - (blocks.C.T @ thrust_body) / m
    nudot = quadratic_mass_term(params, state.r, state.omega, state.rdot) + tau_r \
        - (blocks.M_v_r.T @ thrust_body) / m
    if f_om is not None:
        mudot = mudot + f_om
    if f_r is not None:
        nudot = nudot + f_r
    if lam is not None:
        JcT = contact_jacobians_T(params, state.r, state.R)
        for b in range(n):
            vdot = vdot - lam[b] / m
            gen = JcT[b] @ lam[b]
            mudot = mudot - gen[:3]
            nudot = nudot - gen[3:]
    return Rdot, state.v.copy(), vdot, state.rdot.copy(), mudot, nudot


def kinetic_energy(params: AgentParams, state: AgentState) -> float:
    """Reduced-coordinate kinetic energy 0.5 m |v|^2 + 0.5 xi^T Mbar xi."""
    xi = np.concatenate([state.omega, state.rdot])
    Mbar = reduced_mass(mass_blocks(params, state.r))
    return 0.5 * params.mass * (state.v @ state.v) + 0.5 * xi @ Mbar @ xi


def kinetic_energy_bodies(params: AgentParams, state: AgentState) -> float:
    """Body-by-body kinetic energy; independent check of the reduction."""
    blocks = mass_blocks(params, state.r)
    # body-frame base velocity from the CoM velocity
    u0 = state.R.T @ state.v - (blocks.C @ state.omega + blocks.M_v_r @ state.rdot) / blocks.mass
    T = 0.5 * params.base_mass * (u0 @ u0) + 0.5 * state.omega @ params.base_inertia @ state.omega
    for b, arm in enumerate(params.arms):
        s, s1, _ = arm_geometry(arm, state.r[b])
        w = u0 + np.cross(state.omega, s) + s1 * state.rdot[b]
        T += 0.5 * arm.mass * (w @ w)
    return T
