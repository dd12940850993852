import numpy as np
import pytest

from cooplift import control as ct
from cooplift.agent import AgentParams, AgentState, ArmParams, agent_rhs, mass_blocks, reduced_mass
from cooplift.coupled import (
    GRAVITY,
    PayloadParams,
    PayloadState,
    TeamParams,
    consistent_init,
    grasp_matrix,
    rk4_step,
    solve_contact_forces,
)
from cooplift.so3 import attitude_cost, attitude_error, exp_so3, hat


def _agent():
    arms = tuple(
        ArmParams(
            mount=np.array([0.0, sgn * 0.10, 0.0]),
            axis=np.array([1.0, 0.0, 0.0]),
            rest_dir=np.array([0.0, 0.0, -1.0]),
            length=0.12,
            mass=0.05,
        )
        for sgn in (1.0, -1.0)
    )
    return AgentParams(base_mass=1.1, base_inertia=np.diag([0.015, 0.015, 0.02]), arms=arms)


def _team():
    attachments = (
        np.array([[0.25, 0.15, 0.0], [0.25, -0.15, 0.0]]),
        np.array([[-0.25, 0.15, 0.0], [-0.25, -0.15, 0.0]]),
    )
    payload = PayloadParams(mass=1.5, inertia=np.diag([0.0125, 0.0325, 0.0425]))
    return TeamParams(payload=payload, agents=(_agent(), _agent()), attachments=attachments)


def _hover_ref(p):
    return ct.RefSample(
        p=np.asarray(p, dtype=float),
        v=np.zeros(3),
        a=np.zeros(3),
        R=np.eye(3),
        omega=np.zeros(3),
        omega_dot=np.zeros(3),
    )


def _random_payload(rng, p_scale=1.0, v_scale=1.0):
    return PayloadState(
        p=p_scale * rng.normal(size=3),
        v=v_scale * rng.normal(size=3),
        R=exp_so3(rng.normal(size=3)),
        omega=rng.normal(size=3),
    )


def _random_ref(rng):
    return ct.RefSample(
        p=rng.normal(size=3),
        v=rng.normal(size=3),
        a=rng.normal(size=3),
        R=exp_so3(rng.normal(size=3)),
        omega=rng.normal(size=3),
        omega_dot=rng.normal(size=3),
    )


def test_default_gains_scaling():
    pp = PayloadParams(mass=1.5, inertia=np.diag([0.0125, 0.0325, 0.0425]))
    g = ct.default_payload_gains(pp)
    tr = 0.0125 + 0.0325 + 0.0425
    assert np.allclose(g.Kp, 4.0)
    assert np.allclose(g.Kv, 4.0)
    assert np.allclose(g.KR, 8.0 * tr)
    assert np.allclose(g.Kom, 2.5 * tr)


def test_payload_errors_zero_at_reference():
    ref = _hover_ref([0.0, 0.0, 1.0])
    pl = PayloadState(p=ref.p.copy(), v=np.zeros(3), R=np.eye(3), omega=np.zeros(3))
    e = ct.payload_errors(pl, ref)
    for v in (e.e_p, e.e_v, e.e_R, e.e_om):
        assert np.allclose(v, 0.0, atol=1e-15)
    assert e.Psi == 0.0


def test_payload_errors_match_error_maps():
    rng = np.random.default_rng(3)
    for _ in range(20):
        pl = _random_payload(rng)
        ref = _random_ref(rng)
        e = ct.payload_errors(pl, ref)
        assert np.allclose(e.e_p, pl.p - ref.p, atol=1e-14)
        assert np.allclose(e.e_v, pl.v - ref.v, atol=1e-14)
        assert np.allclose(e.e_R, attitude_error(pl.R, ref.R), atol=1e-14)
        assert np.allclose(e.e_om, pl.omega - pl.R.T @ ref.R @ ref.omega, atol=1e-14)
        assert abs(e.Psi - attitude_cost(pl.R, ref.R)) < 1e-14
        # configuration identity ||e_R||^2 = Psi (2 - Psi)
        assert abs(e.e_R @ e.e_R - e.Psi * (2.0 - e.Psi)) < 1e-12


def test_wrench_nominal_hover_is_weight():
    pp = PayloadParams(mass=1.5, inertia=np.diag([0.0125, 0.0325, 0.0425]))
    ref = _hover_ref([0.0, 0.0, 1.0])
    pl = PayloadState(p=ref.p.copy(), v=np.zeros(3), R=np.eye(3), omega=np.zeros(3))
    W = ct.wrench_nominal(pl, ref, ct.default_payload_gains(pp), pp)
    assert np.allclose(W[:3], np.array([0.0, 0.0, 1.5 * 9.81]), atol=1e-12)
    assert np.allclose(W[3:], 0.0, atol=1e-12)


def test_translational_substitution_identity():
    # substituting the commanded force into the payload translation gives
    # vdot = a_ref - Kp e_p - Kv e_v exactly
    pp = PayloadParams(mass=1.5, inertia=np.diag([0.0125, 0.0325, 0.0425]))
    gains = ct.default_payload_gains(pp)
    rng = np.random.default_rng(4)
    for _ in range(50):
        pl = _random_payload(rng)
        ref = _random_ref(rng)
        W = ct.wrench_nominal(pl, ref, gains, pp)
        vdot = GRAVITY + W[:3] / pp.mass
        e = ct.payload_errors(pl, ref)
        want = ref.a - gains.Kp * e.e_p - gains.Kv * e.e_v
        assert np.allclose(vdot, want, atol=1e-11)


def test_rotational_substitution_identity():
    # substituting the commanded torque into the attitude dynamics gives
    # J d/dt(e_om) = -KR e_R - Kom e_om exactly
    pp = PayloadParams(mass=1.5, inertia=np.diag([0.0125, 0.0325, 0.0425]))
    gains = ct.default_payload_gains(pp)
    J = pp.inertia
    rng = np.random.default_rng(5)
    for _ in range(50):
        pl = _random_payload(rng)
        ref = _random_ref(rng)
        W = ct.wrench_nominal(pl, ref, gains, pp)
        tau_body = pl.R.T @ W[3:]
        om_dot = np.linalg.solve(J, tau_body - np.cross(pl.omega, J @ pl.omega))
        # d/dt e_om with Rd_dot = Rd hat(omega_d)
        Q = pl.R.T @ ref.R
        e_om_dot = om_dot + hat(pl.omega) @ Q @ ref.omega - Q @ ref.omega_dot
        e = ct.payload_errors(pl, ref)
        assert np.allclose(J @ e_om_dot, -gains.KR * e.e_R - gains.Kom * e.e_om, atol=1e-10)


def test_learning_wrench_zero_means_bit_identical():
    pp = PayloadParams(mass=1.5, inertia=np.diag([0.0125, 0.0325, 0.0425]))
    gains = ct.default_payload_gains(pp)
    rng = np.random.default_rng(6)
    pl = _random_payload(rng)
    ref = _random_ref(rng)
    W0 = ct.wrench_nominal(pl, ref, gains, pp)
    W1 = ct.wrench_learning(pl, ref, gains, pp, np.zeros(3), np.zeros(3))
    assert np.array_equal(W0, W1)


def test_learning_wrench_subtracts_predicted_disturbance():
    pp = PayloadParams(mass=1.5, inertia=np.diag([0.0125, 0.0325, 0.0425]))
    gains = ct.default_payload_gains(pp)
    rng = np.random.default_rng(7)
    pl = _random_payload(rng)
    ref = _random_ref(rng)
    f_p = rng.normal(size=3)
    f_om = rng.normal(size=3)
    W0 = ct.wrench_nominal(pl, ref, gains, pp)
    W1 = ct.wrench_learning(pl, ref, gains, pp, f_p, f_om)
    assert np.allclose(W1[:3], W0[:3] - f_p, atol=1e-13)
    # torque channel is compensated in the body frame, then carried to world
    assert np.allclose(W1[3:], W0[3:] - pl.R @ f_om, atol=1e-13)


def test_allocate_follower_mode_basics():
    params = _team()
    rng = np.random.default_rng(8)
    for _ in range(50):
        R_L = exp_so3(rng.normal(size=3))
        G = grasp_matrix(params, R_L)
        W = rng.normal(size=6)
        res = ct.allocate(G, ct.default_leaders(), W)
        # commanded forces realize the wrench through the leader block alone
        assert np.linalg.norm(G @ res.lam.ravel() - W) < 1e-9
        # followers carry nothing by default
        assert np.allclose(res.lam[3], 0.0, atol=1e-15)
        # right pseudoinverse property of the leader block
        Gl = G[:, :9]
        Gl_pinv = np.linalg.pinv(Gl)
        assert np.allclose(Gl @ Gl_pinv, np.eye(6), atol=1e-10)
        assert np.allclose(res.lam.ravel()[:9], Gl_pinv @ W, atol=1e-9)
        # single-contact follower block has a trivial kernel
        assert res.eta_dim == 0


def test_allocate_full_mode_lemma2_and_basis():
    params = _team()
    rng = np.random.default_rng(9)
    for _ in range(200):
        R_L = exp_so3(rng.normal(size=3))
        G = grasp_matrix(params, R_L)
        W = rng.normal(size=6)
        eta = rng.normal(size=6)
        res = ct.allocate(G, ct.default_leaders(), W, eta=eta, internal_basis="full")
        assert res.eta_dim == 6
        assert np.linalg.norm(G @ res.lam.ravel() - W) < 1e-9
        # orthonormal basis of ker(G)
        N = res.basis
        assert N.shape == (12, 6)
        assert np.allclose(N.T @ N, np.eye(6), atol=1e-12)
        assert np.linalg.norm(G @ N) < 1e-11


def test_allocate_eta_linearity():
    params = _team()
    rng = np.random.default_rng(10)
    G = grasp_matrix(params, np.eye(3))
    W = rng.normal(size=6)
    e1 = rng.normal(size=6)
    e2 = rng.normal(size=6)
    base = ct.allocate(G, ct.default_leaders(), W, internal_basis="full").lam
    l1 = ct.allocate(G, ct.default_leaders(), W, eta=e1, internal_basis="full").lam
    l2 = ct.allocate(G, ct.default_leaders(), W, eta=e2, internal_basis="full").lam
    l12 = ct.allocate(G, ct.default_leaders(), W, eta=e1 + e2, internal_basis="full").lam
    assert np.allclose(l12 - base, (l1 - base) + (l2 - base), atol=1e-12)
    # eta never leaks into the realized wrench
    assert np.linalg.norm(G @ l12.ravel() - W) < 1e-9


def test_allocate_rank_deficiency_raises():
    # all leader contacts at the same attachment point: torque rows collapse
    payload = PayloadParams(mass=1.5, inertia=np.diag([0.0125, 0.0325, 0.0425]))
    c = np.array([0.25, 0.15, 0.0])
    attachments = (np.array([c, c]), np.array([c, [-0.25, -0.15, 0.0]]))
    params = TeamParams(payload=payload, agents=(_agent(), _agent()), attachments=attachments)
    G = grasp_matrix(params, np.eye(3))
    with pytest.raises(ct.AllocationError) as err:
        ct.allocate(G, ct.default_leaders(), np.ones(6))
    assert "condition" in str(err.value)


def test_wrench_mismatch_is_linear_in_force_error():
    params = _team()
    rng = np.random.default_rng(11)
    R_L = exp_so3(rng.normal(size=3))
    G = grasp_matrix(params, R_L)
    W = rng.normal(size=6)
    lam_cmd = ct.allocate(G, ct.default_leaders(), W).lam
    err = rng.normal(size=(4, 3))
    dW = ct.wrench_mismatch(G, lam_cmd + err, W)
    assert np.allclose(dW, G @ err.ravel(), atol=1e-10)
    assert np.allclose(ct.wrench_mismatch(G, lam_cmd, W), 0.0, atol=1e-9)


def test_realize_agent_substitution_identity():
    # feeding the realized inputs back into the agent dynamics with
    # lam = lam_cmd and the assumed disturbances must leave pure feedback
    a = _agent()
    gains = ct.AgentGains()
    rng = np.random.default_rng(12)
    for _ in range(20):
        R = exp_so3(0.3 * rng.normal(size=3))
        r = 0.4 * rng.normal(size=2)
        state = AgentState.from_velocities(
            a, R, rng.normal(size=3), r,
            rng.normal(size=3), rng.normal(size=3), rng.normal(size=2),
        )
        lam_cmd = rng.normal(size=(2, 3))
        a_ref = rng.normal(size=3)
        f_hat = (rng.normal(size=3), rng.normal(size=3), rng.normal(size=2))
        r_ref = 0.4 * rng.normal(size=2)
        cmd = ct.realize_agent(a, state, lam_cmd, a_ref, gains, f_hat=f_hat, r_ref=r_ref)
        _, _, _, _, mudot, nudot = agent_rhs(
            a, state, cmd.u, cmd.tau, cmd.tau_r, GRAVITY,
            f_x=f_hat[0], f_om=f_hat[1], f_r=f_hat[2], lam=lam_cmd,
        )
        e_R = attitude_error(state.R, cmd.R_d)
        assert np.allclose(mudot, -gains.kR * e_R - gains.kom * state.omega, atol=1e-10)
        Mrr = reduced_mass(mass_blocks(a, r))[3:, 3:]
        want_nu = Mrr @ (-gains.kp_r * (r - r_ref) - gains.kd_r * state.rdot)
        assert np.allclose(nudot, want_nu, atol=1e-10)

        # align the attitude with the command: thrust then realizes a_ref exactly
        state2 = AgentState.from_velocities(
            a, cmd.R_d, state.x, r, state.omega, state.v, state.rdot)
        cmd2 = ct.realize_agent(a, state2, lam_cmd, a_ref, gains, f_hat=f_hat, r_ref=r_ref)
        _, _, vdot, _, _, _ = agent_rhs(
            a, state2, cmd2.u, cmd2.tau, cmd2.tau_r, GRAVITY,
            f_x=f_hat[0], f_om=f_hat[1], f_r=f_hat[2], lam=lam_cmd,
        )
        assert np.allclose(vdot, a_ref, atol=1e-10)


def test_realize_agent_clamp_and_attitude_hold():
    a = _agent()
    gains = ct.AgentGains()
    state = AgentState.from_velocities(
        a, np.eye(3), np.zeros(3), np.zeros(2), np.zeros(3), np.zeros(3), np.zeros(2))
    # commanded force straight down: thrust cannot pull, so it clamps to zero
    down = ct.realize_agent(a, state, np.zeros((2, 3)), np.array([0.0, 0.0, -30.0]), gains)
    assert down.u == 0.0
    # vanishing force: keep the previous desired attitude
    prev = exp_so3(np.array([0.1, 0.2, -0.3]))
    cmd = ct.realize_agent(a, state, np.zeros((2, 3)), GRAVITY, gains, prev_Rd=prev)
    assert np.allclose(cmd.R_d, prev, atol=1e-15)
    assert cmd.u == 0.0


def test_realize_team_hover_force_balance():
    params = _team()
    payload = PayloadState(
        p=np.array([0.0, 0.0, 1.0]), v=np.zeros(3), R=np.eye(3), omega=np.zeros(3))
    state = consistent_init(params, payload)
    W = np.array([0.0, 0.0, params.payload.mass * 9.81, 0.0, 0.0, 0.0])
    alloc = ct.allocate(grasp_matrix(params, np.eye(3)), ct.default_leaders(), W)
    inputs, _ = ct.realize_team(
        params, state, alloc.lam, [np.zeros(3), np.zeros(3)], ct.AgentGains(),
        r_refs=[s.r.copy() for s in state.agents],
    )
    total = sum(a.mass for a in params.agents) + params.payload.mass
    # thrust axes are vertical at init, so thrusts carry the whole weight
    assert abs(inputs.u.sum() - total * 9.81) < 1e-6
    assert (inputs.u > 0.0).all()


def test_payload_step_freefall_and_spin():
    pp = PayloadParams(mass=1.5, inertia=np.diag([0.0125, 0.0325, 0.0425]))
    pl = PayloadState(
        p=np.array([0.0, 0.0, 2.0]), v=np.array([0.1, -0.2, 0.3]),
        R=np.eye(3), omega=np.array([0.0, 0.0, 0.7]))
    h = 1e-3
    out = pl
    for k in range(1000):
        out = ct.payload_step(pp, out, np.zeros(3), np.zeros(3), h)
    t = 1.0
    want_p = pl.p + pl.v * t + 0.5 * GRAVITY * t * t
    assert np.allclose(out.p, want_p, atol=1e-10)
    # torque-free spin about a principal axis keeps omega and advances R
    assert np.allclose(out.omega, pl.omega, atol=1e-10)
    assert np.allclose(out.R, exp_so3(np.array([0.0, 0.0, 0.7])), atol=1e-8)


def test_psi_monotone_torque_only():
    # overdamped attitude gains, large initial error, zero initial rate
    pp = PayloadParams(mass=1.5, inertia=np.diag([0.0125, 0.0325, 0.0425]))
    tr = float(np.trace(pp.inertia))
    gains = ct.PayloadGains(
        Kp=np.full(3, 4.0), Kv=np.full(3, 4.0),
        KR=np.full(3, 8.0 * tr), Kom=np.full(3, 6.0 * 2.5 * tr))
    ref = _hover_ref([0.0, 0.0, 1.0])
    # Psi(0) = 1.9 < 2: rotate by arccos(1 - 1.9) about a fixed axis
    angle = np.arccos(1.0 - 1.9)
    axis = np.array([1.0, 0.0, 0.0])
    pl = PayloadState(
        p=ref.p.copy(), v=np.zeros(3), R=exp_so3(angle * axis), omega=np.zeros(3))
    assert abs(attitude_cost(pl.R, ref.R) - 1.9) < 1e-12
    h = 1e-3
    last = attitude_cost(pl.R, ref.R)
    for k in range(18000):
        W = ct.wrench_nominal(pl, ref, gains, pp)
        # torque-only subsystem: hold translation frozen
        pl = ct.payload_step(pp, pl, np.zeros(3), pl.R.T @ W[3:], h)
        pl.p = ref.p.copy()
        pl.v = np.zeros(3)
        cur = attitude_cost(pl.R, ref.R)
        assert cur <= last + 1e-12
        last = cur
    assert last < 1e-6


def test_nominal_translation_decay_rate():
    # poles -1 and -3 for kp=3, kv=4; start on the slow eigenvector
    pp = PayloadParams(mass=1.5, inertia=np.diag([0.0125, 0.0325, 0.0425]))
    gains = ct.PayloadGains(
        Kp=np.full(3, 3.0), Kv=np.full(3, 4.0),
        KR=np.full(3, 1.0), Kom=np.full(3, 1.0))
    ref = _hover_ref([0.0, 0.0, 1.0])
    pl = PayloadState(
        p=ref.p + np.array([0.2, 0.0, 0.0]), v=np.array([-0.2, 0.0, 0.0]),
        R=np.eye(3), omega=np.zeros(3))
    h = 1e-3
    ts, norms = [], []
    for k in range(6000):
        W = ct.wrench_nominal(pl, ref, gains, pp)
        pl = ct.payload_step(pp, pl, W[:3], pl.R.T @ W[3:], h)
        if k % 10 == 0:
            ts.append((k + 1) * h)
            norms.append(np.linalg.norm(pl.p - ref.p))
    ts = np.array(ts)
    lo = np.log(np.array(norms))
    sel = (ts > 0.5) & (ts < 4.5)
    rate = -np.polyfit(ts[sel], lo[sel], 1)[0]
    assert abs(rate - 1.0) < 0.1 * 1.0
    assert np.linalg.norm(pl.p - ref.p) < 1e-3


def test_closed_loop_realization_settles():
    # full DAE plant under the layered controller at 100 Hz: commanded and
    # applied contact forces converge after the hand-off transient
    params = _team()
    pp = params.payload
    gains = ct.default_payload_gains(pp)
    agains = ct.AgentGains()
    ref = _hover_ref([0.0, 0.0, 1.0])
    payload = PayloadState(
        p=np.array([0.0, 0.0, 0.98]), v=np.zeros(3), R=np.eye(3), omega=np.zeros(3))
    state = consistent_init(params, payload)
    r_refs = [s.r.copy() for s in state.agents]
    prev = [s.R.copy() for s in state.agents]
    h = 1e-3
    t = 0.0
    inputs = None
    lam_cmd = None
    for k in range(5000):
        if k % 10 == 0:
            W = ct.wrench_nominal(state.payload, ref, gains, pp)
            alloc = ct.allocate(grasp_matrix(params, state.payload.R), ct.default_leaders(), W)
            lam_cmd = alloc.lam
            inputs, prev = ct.realize_team(
                params, state, lam_cmd, [np.zeros(3), np.zeros(3)], agains,
                r_refs=r_refs, prev_Rd=prev)
        state, lam_app = rk4_step(params, state, inputs, None, t, h)
        t += h
    lam_app, _ = solve_contact_forces(params, state, inputs)
    assert np.linalg.norm(lam_app - lam_cmd) < 1e-3
    assert np.linalg.norm(state.payload.p - ref.p) < 1e-3


def test_fit_interface_constants_roundtrip():
    rng = np.random.default_rng(13)
    h = 0.01
    times = np.arange(0.0, 10.0, h)
    tks = [2.0, 6.0]
    e_lam = 0.5 * np.exp(-0.8 * times) + 0.1
    rho = np.stack([
        0.2 + 0.1 * np.sin(times),
        0.3 + 0.05 * np.cos(0.5 * times),
    ], axis=1)
    alpha, gamma, theta = 2.0, 1.3, 0.05
    kappa = np.array([0.3, 0.7])
    starts = np.searchsorted(times, [times[0]] + tks)
    seg = np.searchsorted(np.asarray(tks), times, side="right")
    t0 = np.array([times[0]] + tks)[seg]
    env = alpha * np.exp(-gamma * (times - t0)) * e_lam[starts][seg]
    dw = env + theta + rho @ kappa
    fit = ct.fit_interface_constants(times, dw, e_lam, rho, tks)
    assert abs(fit.alpha - alpha) < 0.01 * alpha
    assert abs(fit.gamma - gamma) < 0.01 * gamma
    assert abs(fit.theta - theta) < 0.01 * theta
    assert np.allclose(fit.kappa, kappa, rtol=0.01)
    assert fit.violation_fraction < 0.01
    assert fit.inflation <= 1.05


def test_fit_interface_constants_zero_log():
    times = np.arange(0.0, 5.0, 0.01)
    fit = ct.fit_interface_constants(
        times, np.zeros_like(times), np.zeros_like(times),
        np.zeros((len(times), 2)), [2.0])
    assert fit.alpha == 0.0 and fit.gamma == 0.0 and fit.theta == 0.0
    assert np.allclose(fit.kappa, 0.0)
    assert fit.violation_fraction == 0.0
