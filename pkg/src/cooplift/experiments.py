"""Closed-loop experiments: the C1/C2/C3 matrix, metrics, and CSV emission.

run_case drives the full pipeline: payload wrench law, allocation, agent
realization, DAE integration, online label collection, and scheduled GP
updates, all from one ScenarioConfig. Cases differ only in which GP
corrections are active; every random stream is keyed by source so the
disturbance and noise realizations match across cases.
"""

from __future__ import annotations

import csv
import math
import os
import time
from collections import deque
from dataclasses import dataclass, replace

import numpy as np

from . import agent as agent_mod
from .control import (
    RefSample,
    allocate,
    fit_interface_constants,
    payload_errors,
    payload_step,
    realize_team,
    wrench_learning,
    wrench_mismatch,
    wrench_nominal,
)
from .coupled import (
    PayloadState,
    consistent_init,
    constraint_residual,
    constraint_velocity,
    grasp_matrix,
    rk4_step,
)
from .gp import (
    GPModel,
    agent_feature,
    confidence_bound,
    farthest_point_indices,
    fit_hyperparameters,
    label_agent,
    label_payload,
    payload_feature,
)
from .scenario import (
    PAYLOAD_FEATURE_DIM,
    ScenarioConfig,
    agent_feature_dim,
    build_agent_gains,
    build_disturbance,
    build_eta,
    build_payload_gains,
    build_reference,
    build_team,
    initial_payload_state,
    prior_kernels,
    rng_streams,
)
from .so3 import exp_so3, hat


@dataclass(frozen=True)
class ExperimentCase:
    case_id: str
    payload_gp: bool
    agent_gp: bool


CASES = {
    "C1": ExperimentCase("C1", False, False),
    "C2": ExperimentCase("C2", True, False),
    "C3": ExperimentCase("C3", True, True),
}


class SolverFailure(RuntimeError):
    """Integration or allocation breakdown, stamped with time and state."""

    def __init__(self, t: float, detail: str, state=None):
        dump = f" state: {state!r}" if state is not None else ""
        super().__init__(f"solver failure at t={t:.6f} s: {detail}{dump}")
        self.t = t


@dataclass
class MetricsLog:
    """Uniformly sampled norms of every tracked quantity."""

    t: np.ndarray
    e_p: np.ndarray
    e_v: np.ndarray
    e_R: np.ndarray
    e_omega: np.ndarray
    Psi: np.ndarray
    dW: np.ndarray
    sigma_L: np.ndarray
    sigma_A: np.ndarray
    lam: np.ndarray  # (T, n_contacts) per-contact force norms
    eta: np.ndarray
    phi: np.ndarray
    n_per_agent: int = 2

    def header(self):
        cols = ["t", "e_p", "e_v", "e_R", "e_omega", "Psi", "dW", "sigma_L", "sigma_A"]
        n_c = self.lam.shape[1]
        for b in range(n_c):
            cols.append(f"lam_{b // self.n_per_agent + 1}_{b % self.n_per_agent + 1}")
        cols += ["eta", "phi"]
        return cols

    def rows(self):
        for i in range(len(self.t)):
            yield [self.t[i], self.e_p[i], self.e_v[i], self.e_R[i],
                   self.e_omega[i], self.Psi[i], self.dW[i], self.sigma_L[i],
                   self.sigma_A[i], *self.lam[i], self.eta[i], self.phi[i]]

    def check_finite(self):
        for name in ("t", "e_p", "e_v", "e_R", "e_omega", "Psi", "dW",
                     "sigma_L", "sigma_A", "lam", "eta", "phi"):
            arr = getattr(self, name)
            if not np.isfinite(arr).all():
                bad = np.argwhere(~np.isfinite(arr))[0]
                raise SolverFailure(float(self.t[int(bad[0])]), f"non-finite {name}")


def render_csv(log: MetricsLog) -> str:
    lines = [",".join(log.header())]
    for row in log.rows():
        lines.append(",".join("%.17g" % v for v in row))
    return "\n".join(lines) + "\n"


def emit(log: MetricsLog, path: str):
    log.check_finite()
    try:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(render_csv(log))
    except OSError as exc:
        raise OSError(f"cannot write metrics to {path}: {exc}") from exc


def parse_metrics(path: str) -> MetricsLog:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        data = np.array([[float(v) for v in row] for row in reader])
    lam_cols = [i for i, name in enumerate(header) if name.startswith("lam_")]
    n_per = max(int(header[i].split("_")[2]) for i in lam_cols)
    cols = {name: data[:, i] for i, name in enumerate(header)}
    return MetricsLog(
        t=cols["t"], e_p=cols["e_p"], e_v=cols["e_v"], e_R=cols["e_R"],
        e_omega=cols["e_omega"], Psi=cols["Psi"], dW=cols["dW"],
        sigma_L=cols["sigma_L"], sigma_A=cols["sigma_A"],
        lam=data[:, lam_cols], eta=cols["eta"], phi=cols["phi"],
        n_per_agent=n_per,
    )


def steady_state_rms(t: np.ndarray, x: np.ndarray, fraction: float = 0.25) -> float:
    """RMS over the trailing fraction of the horizon."""
    t0 = t[0] + (1.0 - fraction) * (t[-1] - t[0])
    tail = x[t >= t0]
    return float(np.sqrt(np.mean(np.square(tail))))


# ---------------------------------------------------------------------------
# model bookkeeping


class _ModelSlot:
    """One GP (payload or agent) plus its confidence scaling."""

    def __init__(self, cfg: ScenarioConfig, dim: int, out_channels: int, beta_channels: int):
        self.cfg = cfg
        self.dim = dim
        self.out_channels = out_channels
        self.beta_channels = beta_channels
        self.priors = prior_kernels(cfg, dim, out_channels)
        self.model = GPModel(self.priors, np.zeros((0, dim)), np.zeros((0, out_channels)))
        self.bound = confidence_bound(self.model, cfg.delta, B=cfg.rkhs_bound,
                                      channels=beta_channels)

    def refit(self, X, Y, rng):
        cfg = self.cfg
        if len(X) >= 5:
            kernels = fit_hyperparameters(
                X, Y, restarts=cfg.restarts, maxiter=cfg.maxiter, rng=rng,
                ls_bounds=(1e-3, cfg.lengthscale_upper))
        else:
            kernels = self.priors
        self.model = GPModel(kernels, X, Y)
        B = None if self.model.N > 0 else cfg.rkhs_bound
        self.bound = confidence_bound(self.model, cfg.delta, B=B,
                                      channels=self.beta_channels)

    def query(self, feat):
        """(mean, sigma_norm, rho) at one feature point."""
        mean, var = self.model.posterior(feat)
        sig = np.sqrt(var)
        return mean, float(sig.max()), float(np.linalg.norm(self.bound.beta * sig))


def _kernel_summary(prefix: str, model: GPModel, out: dict):
    for c, p in enumerate(model.kernels):
        out[f"{prefix}_{c}_signal_var"] = p.signal_var
        out[f"{prefix}_{c}_noise_var"] = p.noise_var
        out[f"{prefix}_{c}_ls_min"] = float(np.min(p.lengthscales))
        out[f"{prefix}_{c}_ls_max"] = float(np.max(p.lengthscales))


# ---------------------------------------------------------------------------
# induced agent references along the payload reference path


def _aligned_pose_solve(a, anchors, b3_des, R0, x0, r0, max_iter=60, tol=3e-15):
    """Grasp-consistent agent pose with the thrust axis steered onto b3_des.

    The closed chain leaves each agent a two-dimensional pose freedom for a
    given payload pose; steering the body z axis onto the required force
    direction consumes exactly that freedom.  The alignment residual is
    projected onto a basis of the plane normal to b3_des, which makes the
    Newton system square and the root independent of the starting guess;
    downstream finite differencing relies on that determinism.
    """
    R, x, r = R0.copy(), x0.copy(), r0.copy()
    n = a.n_joints
    e3 = np.array([0.0, 0.0, 1.0])
    pick = int(np.argmin(np.abs(b3_des)))
    seed = np.zeros(3)
    seed[pick] = 1.0
    b1 = seed - b3_des * b3_des[pick]
    b1 /= np.linalg.norm(b1)
    B = np.column_stack([b1, np.cross(b3_des, b1)])
    Jac = np.zeros((3 * n + 2, 6 + n))
    prev = np.inf
    for _ in range(max_iter):
        tips = agent_mod.contact_points(a, r, R, x)
        full = np.concatenate([(tips - anchors).ravel(),
                               B.T @ np.cross(R[:, 2], b3_des)])
        res_now = np.linalg.norm(full)
        # run to the roundoff floor: stencil differencing downstream divides
        # by eps^2, so any guess-dependent residual shows up as jitter
        if res_now < tol or res_now > 0.3 * prev:
            break
        prev = res_now
        JcT = agent_mod.contact_jacobians_T(a, r, R)
        for b in range(n):
            Jac[3 * b:3 * b + 3, :3] = JcT[b, :3, :].T
            Jac[3 * b:3 * b + 3, 3:6] = np.eye(3)
            Jac[3 * b:3 * b + 3, 6:] = JcT[b, 3:, :].T
        Jac[3 * n:, :3] = B.T @ hat(b3_des) @ R @ hat(e3)
        Jac[3 * n:, 3:] = 0.0
        try:
            step = np.linalg.solve(Jac, -full)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(Jac, -full, rcond=None)[0]
        R = R @ exp_so3(step[:3])
        x = x + step[3:6]
        r = r + step[6:]
    res = float(np.linalg.norm((agent_mod.contact_points(a, r, R, x) - anchors).ravel()))
    if res > 1e-9:
        raise SolverFailure(f"induced pose solve stalled, contact residual {res:.2e}")
    return R, x, r


def _vee_skew(S):
    A = 0.5 * (S - S.T)
    return np.array([A[2, 1], A[0, 2], A[1, 0]])


@dataclass
class _InducedRefs:
    Rd: list
    om: list
    omdot: list
    xdd: list
    rr: list
    rdot: list
    rddot: list


class _InducedPlanner:
    """Induced per-agent references along the payload reference path.

    For each instant it solves the constraint-consistent agent pose whose
    thrust axis carries the force the agent needs on the reference path
    (base acceleration included, via a short fixed-point iteration), then
    differentiates that pose numerically for attitude-rate, joint-rate,
    and base-acceleration feedforward.  Everything depends on the
    reference alone, so all controller cases share the same planner
    output and the results are memoized per instant (periodically when
    the reference repeats).
    """

    def __init__(self, cfg, nominal, pgains, reference, eps=1e-3, dt_grid=0.02):
        self.cfg = cfg
        self.nom = nominal
        self.pg = pgains
        self.ref = reference
        self.eps = eps
        self.dt_grid = dt_grid
        period = getattr(reference, "period", None)
        n_grid = None
        if period is not None:
            n_grid = int(round(period / dt_grid))
            if abs(n_grid * dt_grid - period) > 1e-9:
                n_grid = None
        self._n_grid = n_grid
        self._pose_cache = {}
        self._lam_cache = {}
        self._node_cache = {}
        self._warm = None

    def _lam_ff(self, t):
        key = round(t, 12)
        hit = self._lam_cache.get(key)
        if hit is not None:
            return hit
        ref_t = self.ref.sample(t)
        pl_ref = PayloadState(p=ref_t.p, v=ref_t.v, R=ref_t.R, omega=ref_t.omega)
        W_ff = wrench_nominal(pl_ref, ref_t, self.pg, self.nom.payload)
        lam = allocate(grasp_matrix(self.nom, ref_t.R), self.cfg.leaders, W_ff,
                       internal_basis=self.cfg.internal_basis,
                       cond_limit=self.cfg.cond_limit).lam
        self._lam_cache[key] = (ref_t, lam)
        return ref_t, lam

    def _poses(self, t, b3s):
        key = round(t, 9)
        ref_t = self.ref.sample(t)
        warm = self._pose_cache.get(key, self._warm)
        out = []
        for j, a in enumerate(self.nom.agents):
            anchors = ref_t.p + self.nom.attachments[j] @ ref_t.R.T
            if warm is None:
                R0 = np.eye(3)
                x0 = anchors.mean(axis=0) + np.array([0.0, 0.0, 0.8 * a.arms[0].length])
                r0 = np.zeros(a.n_joints)
            else:
                R0, x0, r0 = warm[j]
            out.append(_aligned_pose_solve(a, anchors, b3s[j], R0, x0, r0))
        self._pose_cache[key] = out
        self._warm = out
        return out

    def _b3_from(self, t, acc_list):
        # unit thrust directions carrying the per-agent required base force
        _, lam = self._lam_ff(t)
        out, k0 = [], 0
        for j, a in enumerate(self.nom.agents):
            nj = a.n_joints
            F = a.mass * (acc_list[j] - self.nom.gravity) \
                + lam[k0:k0 + nj].sum(axis=0)
            out.append(F / np.linalg.norm(F))
            k0 += nj
        return out

    def _node(self, i: int) -> _InducedRefs:
        if self._n_grid is not None:
            i = i % self._n_grid
        hit = self._node_cache.get(i)
        if hit is None:
            hit = self._eval_exact(i * self.dt_grid)
            self._node_cache[i] = hit
        return hit

    def eval(self, t) -> _InducedRefs:
        """Induced references at time t, interpolated off the node grid.

        The induced motion has the reference path's bandwidth, far below
        the node rate, so linear interpolation (geodesic for the attitude)
        is accurate to well under the realization floor.
        """
        s = t / self.dt_grid
        i = int(math.floor(s))
        w = s - i
        if w < 1e-9:
            return self._node(i)
        g0 = self._node(i)
        g1 = self._node(i + 1)
        out = _InducedRefs([], [], [], [], [], [], [])
        for j in range(len(self.nom.agents)):
            d = _vee_skew(g0.Rd[j].T @ g1.Rd[j])
            out.Rd.append(g0.Rd[j] @ exp_so3(w * d))
            out.om.append((1 - w) * g0.om[j] + w * g1.om[j])
            out.omdot.append((1 - w) * g0.omdot[j] + w * g1.omdot[j])
            out.xdd.append((1 - w) * g0.xdd[j] + w * g1.xdd[j])
            out.rr.append((1 - w) * g0.rr[j] + w * g1.rr[j])
            out.rdot.append((1 - w) * g0.rdot[j] + w * g1.rdot[j])
            out.rddot.append((1 - w) * g0.rddot[j] + w * g1.rddot[j])
        return out

    def _eval_exact(self, t) -> _InducedRefs:
        eps = self.eps
        n_ag = len(self.nom.agents)
        ts = [t + k * eps for k in (-2, -1, 0, 1, 2)]
        # pass 1: alignment from the payload reference acceleration alone
        P5 = [self._poses(tt, self._b3_from(tt, [self.ref.sample(tt).a] * n_ag))
              for tt in ts]
        # pass 2: re-align with the base accelerations of the pass-1 path so
        # the differentiated pose carries the relative-geometry acceleration
        P3 = []
        for i in (1, 2, 3):
            xdd = [(P5[i - 1][j][1] - 2.0 * P5[i][j][1] + P5[i + 1][j][1]) / eps ** 2
                   for j in range(n_ag)]
            P3.append(self._poses(ts[i], self._b3_from(ts[i], xdd)))
        Pm, P0, Pp = P3
        refs = _InducedRefs([], [], [], [], [], [], [])
        for j in range(len(self.nom.agents)):
            Rm, xm, rm = Pm[j]
            R0_, x0_, r0_ = P0[j]
            Rp, xp, rp = Pp[j]
            refs.Rd.append(R0_)
            refs.om.append(_vee_skew(Rm.T @ Rp) / (2.0 * eps))
            q1 = _vee_skew(Rm.T @ R0_) / eps
            q2 = _vee_skew(R0_.T @ Rp) / eps
            refs.omdot.append((q2 - q1) / eps)
            refs.xdd.append((xm - 2.0 * x0_ + xp) / eps ** 2)
            refs.rr.append(r0_)
            refs.rdot.append((rp - rm) / (2.0 * eps))
            refs.rddot.append((rp - 2.0 * r0_ + rm) / eps ** 2)
        return refs


# ---------------------------------------------------------------------------
# the closed-loop run


def run_case(cfg: ScenarioConfig, case: ExperimentCase, out_dir=None):
    """Simulate one controller configuration; returns (MetricsLog, summary)."""
    t_start = time.perf_counter()
    nominal = build_team(cfg)
    plant = build_team(cfg, plant=True)
    pgains = build_payload_gains(cfg)
    again = build_agent_gains(cfg)
    reference = build_reference(cfg)
    streams = rng_streams(cfg)
    dist = build_disturbance(cfg, streams["disturbance"])

    n_steps = int(round(cfg.horizon / cfg.h))
    sp_ctrl = int(round(1.0 / (cfg.control_hz * cfg.h)))
    sp_log = int(round(1.0 / (cfg.log_hz * cfg.h)))
    label_offset = sp_ctrl // 2 if sp_ctrl >= 3 else None
    n_r = cfg.contacts_per_agent
    n_agents = cfg.n_agents
    n_c = n_agents * n_r

    state = consistent_init(plant, initial_payload_state(cfg))
    prev_Rd = None
    dt_ctrl = sp_ctrl * cfg.h
    planner = _InducedPlanner(cfg, nominal, pgains, reference)

    pay_slot = _ModelSlot(cfg, PAYLOAD_FEATURE_DIM, 6, 6)
    ag_slots = [_ModelSlot(cfg, agent_feature_dim(cfg), 6 + n_r, 9) for _ in range(n_agents)]

    # label streams: per-source time / feature-input rows
    pay_t, pay_X, pay_Y = [], [], []
    ag_t = [[] for _ in range(n_agents)]
    ag_X = [[] for _ in range(n_agents)]
    ag_Y = [[] for _ in range(n_agents)]
    frames = deque(maxlen=3)

    pending = [tu for tu in cfg.update_times if tu < cfg.horizon]
    updates_applied = 0
    att_stack = nominal.attachment_stack()

    n_logs = (n_steps + sp_log - 1) // sp_log
    L = MetricsLog(
        t=np.empty(n_logs), e_p=np.empty(n_logs), e_v=np.empty(n_logs),
        e_R=np.empty(n_logs), e_omega=np.empty(n_logs), Psi=np.empty(n_logs),
        dW=np.empty(n_logs), sigma_L=np.empty(n_logs), sigma_A=np.empty(n_logs),
        lam=np.empty((n_logs, n_c)), eta=np.empty(n_logs), phi=np.empty(n_logs),
        n_per_agent=n_r,
    )
    e_lam_trace = np.empty(n_logs)
    rho_agents = np.empty((n_logs, n_agents))
    max_phi = 0.0
    max_phi_dot = 0.0

    inputs = None
    W_cmd = None
    lam_cmd = None
    log_i = 0

    for k in range(n_steps):
        t = k * cfg.h
        if k % sp_ctrl == 0:
            while pending and t >= pending[0] - 1e-12:
                t_u = pending.pop(0)
                u_idx = list(cfg.update_times).index(t_u)
                if case.payload_gp:
                    _refit_from_stream(pay_slot, pay_t, pay_X, pay_Y, t_u,
                                       cfg.budget, streams["fit_payload"][u_idx])
                if case.agent_gp:
                    for j in range(n_agents):
                        _refit_from_stream(ag_slots[j], ag_t[j], ag_X[j], ag_Y[j],
                                           t_u, cfg.budget,
                                           streams[f"fit_agent_{j}"][u_idx])
                updates_applied += 1
            ref = reference.sample(t)
            # feedback errors read the instantaneous reference; the held
            # feedforward targets the middle of the hold window
            ref_mid = reference.sample(t + 0.5 * dt_ctrl)
            ref_cmd = RefSample(p=ref.p, v=ref.v, a=ref_mid.a, R=ref.R,
                                omega=ref.omega, omega_dot=ref.omega_dot)
            err = payload_errors(state.payload, ref)
            pay_feat = payload_feature(state.payload, ref.p)
            pay_mean, pay_sig, _ = pay_slot.query(pay_feat)
            if case.payload_gp:
                W_cmd = wrench_learning(state.payload, ref_cmd, pgains, nominal.payload,
                                        pay_mean[:3], pay_mean[3:6])
            else:
                W_cmd = wrench_nominal(state.payload, ref_cmd, pgains, nominal.payload)
            G = grasp_matrix(nominal, state.payload.R)
            alloc = allocate(G, cfg.leaders, W_cmd,
                             internal_basis=cfg.internal_basis,
                             cond_limit=cfg.cond_limit)
            lam_cmd = alloc.lam
            ag_info = [slot.query(agent_feature(s))
                       for slot, s in zip(ag_slots, state.agents)]
            if case.agent_gp:
                f_hats = [(m[:3], m[3:6], m[6:]) for m, _, _ in ag_info]
            else:
                f_hats = None
            # each agent gets its induced reference (pose-consistent base
            # acceleration, attitude, rates) plus the payload's feedback
            # correction carried rigidly
            ffr = planner.eval(t + 0.5 * dt_ctrl)
            a_corr = -pgains.Kp * err.e_p - pgains.Kv * err.e_v
            if case.payload_gp:
                a_corr = a_corr - pay_mean[:3] / nominal.payload.mass
            a_refs = [ffr.xdd[j] + a_corr for j in range(n_agents)]
            # joint servos damp deviations from the induced joint motion
            # instead of fighting the constraint
            r_refs = [s.r.copy() for s in state.agents]
            inputs, prev_Rd = realize_team(nominal, state, lam_cmd, a_refs, again,
                                           f_hats=f_hats, prev_Rd=prev_Rd,
                                           r_refs=r_refs, rdot_refs=ffr.rdot,
                                           rddot_refs=ffr.rddot,
                                           omega_ds=ffr.om,
                                           omega_d_dots=ffr.omdot,
                                           Rd_bases=ffr.Rd,
                                           yaw=cfg.yaw)

        try:
            state_next, lam_app = rk4_step(plant, state, inputs, dist, t, cfg.h,
                                           alpha=cfg.alpha)
        except np.linalg.LinAlgError as exc:
            raise SolverFailure(t, f"contact solve failed ({exc})", state) from exc

        if k % sp_log == 0:
            phi = float(np.linalg.norm(constraint_residual(plant, state)))
            phid = float(np.linalg.norm(constraint_velocity(plant, state)))
            max_phi = max(max_phi, phi)
            max_phi_dot = max(max_phi_dot, phid)
            L.t[log_i] = t
            L.e_p[log_i] = np.linalg.norm(err.e_p)
            L.e_v[log_i] = np.linalg.norm(err.e_v)
            L.e_R[log_i] = np.linalg.norm(err.e_R)
            L.e_omega[log_i] = np.linalg.norm(err.e_om)
            L.Psi[log_i] = err.Psi
            L.dW[log_i] = np.linalg.norm(wrench_mismatch(G, lam_app, W_cmd))
            L.sigma_L[log_i] = pay_sig
            L.sigma_A[log_i] = sum(info[1] for info in ag_info)
            L.lam[log_i] = np.linalg.norm(lam_app, axis=1)
            L.eta[log_i] = 0.0
            L.phi[log_i] = phi
            e_lam_trace[log_i] = np.linalg.norm(lam_app - lam_cmd)
            rho_agents[log_i] = [info[2] for info in ag_info]
            log_i += 1

        if label_offset is not None:
            frames.append((t, state, inputs, lam_app))
            if len(frames) == 3 and (k - 1) % sp_ctrl == label_offset:
                _collect_labels(cfg, case, nominal, att_stack, reference, frames,
                                streams, pay_t, pay_X, pay_Y, ag_t, ag_X, ag_Y)

        state = state_next

    L.check_finite()
    fit = fit_interface_constants(L.t, L.dW, e_lam_trace, rho_agents,
                                  [tu for tu in cfg.update_times if tu < cfg.horizon])
    summary = _summarize(cfg, case, L, fit, pay_slot, ag_slots, updates_applied,
                         len(pay_t), [len(s) for s in ag_t], max_phi, max_phi_dot,
                         time.perf_counter() - t_start)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        emit(L, os.path.join(out_dir, "metrics.csv"))
        write_summary(summary, os.path.join(out_dir, "summary.txt"))
    return L, summary


def _refit_from_stream(slot: _ModelSlot, t_list, X_list, Y_list, t_u, budget, rng):
    if t_list:
        tarr = np.asarray(t_list)
        mask = tarr <= t_u + 1e-12
        X = np.asarray(X_list)[mask]
        Y = np.asarray(Y_list)[mask]
    else:
        X = np.zeros((0, slot.dim))
        Y = np.zeros((0, slot.out_channels))
    idx = farthest_point_indices(X, budget)
    slot.refit(X[idx], Y[idx], rng)


def _collect_labels(cfg, case, nominal, att_stack, reference, frames, streams,
                    pay_t, pay_X, pay_Y, ag_t, ag_X, ag_Y):
    (t0, s0, in0, l0), (t1, s1, in1, l1), (t2, s2, in2, l2) = frames
    if case.payload_gp:
        p_ref = np.array([reference.sample(tt).p for tt in (t0, t1, t2)])
        X, Y = label_payload(nominal.payload, [s0.payload, s1.payload, s2.payload],
                             np.array([l0, l1, l2]), att_stack, p_ref, cfg.h,
                             noise_std=cfg.noise_std, rng=streams["labels_payload"])
        pay_t.append(t1)
        pay_X.append(X[0])
        pay_Y.append(Y[0])
    if case.agent_gp:
        n_r = cfg.contacts_per_agent
        for j, a in enumerate(nominal.agents):
            sl = slice(j * n_r, (j + 1) * n_r)
            X, Y = label_agent(
                a, [s0.agents[j], s1.agents[j], s2.agents[j]],
                np.array([in0.u[j], in1.u[j], in2.u[j]]),
                np.array([in0.tau[j], in1.tau[j], in2.tau[j]]),
                np.array([in0.tau_r[j], in1.tau_r[j], in2.tau_r[j]]),
                np.array([l0[sl], l1[sl], l2[sl]]), cfg.h,
                noise_std=cfg.noise_std, rng=streams[f"labels_agent_{j}"])
            ag_t[j].append(t1)
            ag_X[j].append(X[0])
            ag_Y[j].append(Y[0])


def _summarize(cfg, case, L, fit, pay_slot, ag_slots, updates, n_pay_labels,
               n_ag_labels, max_phi, max_phi_dot, wall):
    s = {
        "case": case.case_id,
        "seed": cfg.seed,
        "horizon": cfg.horizon,
        "h": cfg.h,
        "payload_gp": int(case.payload_gp),
        "agent_gp": int(case.agent_gp),
        "gp_updates_applied": updates,
        "payload_labels": n_pay_labels,
    }
    for j, n in enumerate(n_ag_labels):
        s[f"agent_{j}_labels"] = n
    for name in ("e_p", "e_v", "e_R", "e_omega", "Psi", "dW", "sigma_L",
                 "sigma_A", "eta", "phi"):
        s[f"ss_rms_{name}"] = steady_state_rms(L.t, getattr(L, name))
    for b in range(L.lam.shape[1]):
        s[f"ss_rms_lam_{b // L.n_per_agent + 1}_{b % L.n_per_agent + 1}"] = \
            steady_state_rms(L.t, L.lam[:, b])
    s["max_phi"] = max_phi
    s["max_phi_dot"] = max_phi_dot
    s["alpha_W"] = fit.alpha
    s["gamma_W"] = fit.gamma
    s["theta_W"] = fit.theta
    for j, kj in enumerate(np.atleast_1d(fit.kappa)):
        s[f"kappa_{j + 1}"] = float(kj)
    s["envelope_violation_fraction"] = fit.violation_fraction
    s["envelope_inflation"] = fit.inflation
    s["envelope_rms"] = fit.rms
    s["B_payload"] = pay_slot.bound.B
    for j, slot in enumerate(ag_slots):
        s[f"B_agent_{j}"] = slot.bound.B
    _kernel_summary("kernel_payload", pay_slot.model, s)
    for j, slot in enumerate(ag_slots):
        _kernel_summary(f"kernel_agent{j}", slot.model, s)
    s["wall_time_s"] = wall
    return s


def write_summary(summary: dict, path: str):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for key, val in summary.items():
            if isinstance(val, float):
                fh.write(f"{key} = {val!r}\n")
            else:
                fh.write(f"{key} = {val}\n")


# ---------------------------------------------------------------------------
# the case matrix


_COMPARISON_COLS = ["case", "ss_rms_e_p", "ss_rms_e_v", "ss_rms_Psi", "ss_rms_dW",
                    "ss_rms_sigma_L", "ss_rms_sigma_A", "alpha_W", "gamma_W",
                    "theta_W", "envelope_inflation"]


def run_matrix(cfg: ScenarioConfig, out_dir=None):
    """Run C1, C2, C3 and emit per-case logs plus comparison artifacts."""
    results = {}
    for cid in ("C1", "C2", "C3"):
        case_dir = os.path.join(out_dir, cid) if out_dir is not None else None
        results[cid] = run_case(cfg, CASES[cid], out_dir=case_dir)
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        _write_comparison(results, out_dir)
        _write_figures(results, out_dir)
    return results


def comparison_rows(results) -> list:
    rows = []
    for cid in ("C1", "C2", "C3"):
        _, summary = results[cid]
        rows.append([summary[c] if c != "case" else cid for c in _COMPARISON_COLS])
    return rows


def _write_comparison(results, out_dir):
    rows = comparison_rows(results)
    with open(os.path.join(out_dir, "comparison.csv"), "w",
              encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(_COMPARISON_COLS) + "\n")
        for row in rows:
            fh.write(",".join(v if isinstance(v, str) else "%.17g" % v for v in row) + "\n")
    widths = [max(len(c), 12) for c in _COMPARISON_COLS]
    with open(os.path.join(out_dir, "comparison.txt"), "w",
              encoding="utf-8", newline="\n") as fh:
        fh.write("  ".join(c.ljust(w) for c, w in zip(_COMPARISON_COLS, widths)) + "\n")
        for row in rows:
            cells = [v.ljust(w) if isinstance(v, str) else ("%.6g" % v).ljust(w)
                     for v, w in zip(row, widths)]
            fh.write("  ".join(cells) + "\n")


def _write_figures(results, out_dir):
    """Per-figure CSV bundles: tracking, interface, uncertainty, contacts."""
    cids = ("C1", "C2", "C3")
    t = results["C1"][0].t
    bundles = {
        "fig1_tracking.csv": [(f"{m}_{c}", getattr(results[c][0], m))
                              for m in ("e_p", "Psi") for c in cids],
        "fig2_interface.csv": [(f"dW_{c}", results[c][0].dW) for c in cids],
        "fig3_uncertainty.csv": [(f"{m}_{c}", getattr(results[c][0], m))
                                 for m in ("sigma_L", "sigma_A") for c in cids],
    }
    contact_cols = []
    for c in cids:
        log = results[c][0]
        for b in range(log.lam.shape[1]):
            name = f"lam_{b // log.n_per_agent + 1}_{b % log.n_per_agent + 1}_{c}"
            contact_cols.append((name, log.lam[:, b]))
    contact_cols += [(f"eta_{c}", results[c][0].eta) for c in cids]
    bundles["fig4_contacts.csv"] = contact_cols
    for fname, cols in bundles.items():
        with open(os.path.join(out_dir, fname), "w", encoding="utf-8", newline="\n") as fh:
            fh.write(",".join(["t"] + [name for name, _ in cols]) + "\n")
            for i in range(len(t)):
                vals = [t[i]] + [arr[i] for _, arr in cols]
                fh.write(",".join("%.17g" % v for v in vals) + "\n")


# ---------------------------------------------------------------------------
# internal-force study


def eta_experiment(cfg: ScenarioConfig, profile=None, out_dir=None):
    """Paired exact-realization runs, eta = 0 vs eta active.

    The payload integrates under G lam_cmd directly, so any pose divergence
    between the runs measures internal-force leakage through the allocation.
    Returns (log_off, log_on, report).
    """
    eta_fn = profile if profile is not None else build_eta(cfg)
    if eta_fn is None:
        amp, w = 1.0, 2.0 * math.pi * cfg.eta_frequency
        direction = np.zeros(max(3 * cfg.n_agents * cfg.contacts_per_agent - 6, 1))
        direction[0] = 1.0
        eta_fn = lambda t: amp * math.sin(w * t) * direction

    log_off, traj_off, lam_off = _eta_run(cfg, None)
    log_on, traj_on, lam_on = _eta_run(cfg, eta_fn)
    pose_div = np.array([
        np.linalg.norm(pa - pb) + _rot_angle(Ra, Rb)
        for (pa, Ra), (pb, Rb) in zip(traj_off, traj_on)
    ])
    report = {
        "max_pose_divergence": float(pose_div.max()),
        "max_lam_redistribution": float(max(
            np.linalg.norm(a - b) for a, b in zip(lam_off, lam_on))),
        "max_wrench_residual_off": float(log_off.dW.max()),
        "max_wrench_residual_on": float(log_on.dW.max()),
        "max_eta": float(log_on.eta.max()),
    }
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        emit(log_off, os.path.join(out_dir, "eta_off.csv"))
        emit(log_on, os.path.join(out_dir, "eta_on.csv"))
        write_summary(report, os.path.join(out_dir, "eta_report.txt"))
    return log_off, log_on, report


def _rot_angle(Ra, Rb):
    c = 0.5 * (np.trace(Ra.T @ Rb) - 1.0)
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def _eta_run(cfg: ScenarioConfig, eta_fn):
    nominal = build_team(cfg)
    pgains = build_payload_gains(cfg)
    reference = build_reference(cfg)
    pl = initial_payload_state(cfg)
    n_steps = int(round(cfg.horizon / cfg.h))
    sp_ctrl = int(round(1.0 / (cfg.control_hz * cfg.h)))
    sp_log = int(round(1.0 / (cfg.log_hz * cfg.h)))
    n_r = cfg.contacts_per_agent
    n_c = cfg.n_agents * n_r
    n_logs = (n_steps + sp_log - 1) // sp_log
    sig_L = math.sqrt(cfg.prior_signal)
    L = MetricsLog(
        t=np.empty(n_logs), e_p=np.empty(n_logs), e_v=np.empty(n_logs),
        e_R=np.empty(n_logs), e_omega=np.empty(n_logs), Psi=np.empty(n_logs),
        dW=np.empty(n_logs), sigma_L=np.full(n_logs, sig_L),
        sigma_A=np.full(n_logs, cfg.n_agents * sig_L),
        lam=np.empty((n_logs, n_c)), eta=np.empty(n_logs),
        phi=np.zeros(n_logs), n_per_agent=n_r,
    )
    traj = []
    lam_log = []
    W_app = None
    tau_body = None
    log_i = 0
    for k in range(n_steps):
        t = k * cfg.h
        if k % sp_ctrl == 0:
            ref = reference.sample(t)
            err = payload_errors(pl, ref)
            W_cmd = wrench_nominal(pl, ref, pgains, nominal.payload)
            G = grasp_matrix(nominal, pl.R)
            eta = eta_fn(t) if eta_fn is not None else None
            alloc = allocate(G, cfg.leaders, W_cmd, eta=eta, internal_basis="full",
                             cond_limit=cfg.cond_limit)
            lam_cmd = alloc.lam
            W_app = G @ lam_cmd.reshape(-1)
            tau_body = pl.R.T @ W_app[3:]
        if k % sp_log == 0:
            L.t[log_i] = t
            L.e_p[log_i] = np.linalg.norm(err.e_p)
            L.e_v[log_i] = np.linalg.norm(err.e_v)
            L.e_R[log_i] = np.linalg.norm(err.e_R)
            L.e_omega[log_i] = np.linalg.norm(err.e_om)
            L.Psi[log_i] = err.Psi
            L.dW[log_i] = np.linalg.norm(W_app - W_cmd)
            L.lam[log_i] = np.linalg.norm(lam_cmd, axis=1)
            L.eta[log_i] = 0.0 if eta is None else np.linalg.norm(eta)
            traj.append((pl.p.copy(), pl.R.copy()))
            lam_log.append(lam_cmd.copy())
            log_i += 1
        pl = payload_step(nominal.payload, pl, W_app[:3], tau_body, cfg.h)
    return L, traj, lam_log


# ---------------------------------------------------------------------------
# invariant suite


def validate(cfg: ScenarioConfig):
    """Fast invariant checks on the configured scenario.

    Returns [(name, passed, detail), ...]; all checks run even when one
    fails so the report is complete.
    """
    from . import so3

    checks = []
    rng = rng_streams(cfg)["validate"]
    nominal = build_team(cfg)

    # allocation identity over random attitudes, wrenches, internal inputs
    worst = 0.0
    for _ in range(1000):
        R_L = so3.exp_so3(rng.normal(size=3))
        G = grasp_matrix(nominal, R_L)
        W = rng.normal(size=6)
        alloc = allocate(G, cfg.leaders, W,
                         eta=rng.normal(size=6), internal_basis="full",
                         cond_limit=cfg.cond_limit)
        worst = max(worst, float(np.linalg.norm(G @ alloc.lam.reshape(-1) - W)))
    checks.append(("allocation_identity", worst <= 1e-9, f"max |G lam - W| = {worst:.3e}"))

    # hat/vee round trip
    v = rng.normal(size=3)
    err = float(np.linalg.norm(so3.vee(so3.hat(v)) - v))
    checks.append(("hat_vee_roundtrip", err == 0.0, f"residual = {err:.3e}"))

    # one-point GP posterior closed form
    from .gp import KernelParams
    p = KernelParams(signal_var=2.0, lengthscales=np.array([0.5]), noise_var=0.1)
    model = GPModel([p], np.array([[0.2]]), np.array([[1.0]]))
    mean, var = model.posterior(np.array([0.2]))
    want_m = 1.0 * 2.0 / 2.1
    want_v = 2.0 - 4.0 / 2.1
    gp_err = max(abs(mean[0] - want_m), abs(var[0] - want_v))
    checks.append(("gp_one_point_posterior", gp_err < 1e-9, f"error = {gp_err:.3e}"))

    # consistent initialization on the configured geometry
    state = consistent_init(nominal, initial_payload_state(cfg))
    res = float(np.linalg.norm(constraint_residual(nominal, state)))
    vres = float(np.linalg.norm(constraint_velocity(nominal, state)))
    checks.append(("consistent_init", res < 1e-10 and vres < 1e-9,
                   f"|Phi| = {res:.3e}, |Phi_dot| = {vres:.3e}"))

    # determinism of the emitted log on a short nominal run
    short = replace(cfg, horizon=min(cfg.horizon, 1.0))
    csv_a = render_csv(run_case(short, CASES["C1"])[0])
    csv_b = render_csv(run_case(short, CASES["C1"])[0])
    checks.append(("determinism", csv_a == csv_b,
                   f"{len(csv_a)} bytes {'match' if csv_a == csv_b else 'differ'}"))
    return checks
