import numpy as np

from cooplift.agent import AgentParams, ArmParams, mass_blocks, reduced_mass
from cooplift.coupled import (
    CoupledState,
    InputSet,
    PayloadParams,
    PayloadState,
    TeamParams,
    consistent_init,
    constraint_accel_bias,
    constraint_jacobian,
    constraint_residual,
    constraint_velocity,
    coupled_rhs,
    dimension_audit,
    grasp_matrix,
    pack,
    project_constraints,
    rk4_step,
    solve_contact_forces,
    stacked_velocities,
    total_energy,
    unpack,
)
from cooplift.so3 import exp_so3, hat


def _team():
    def agent():
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

    attachments = (
        np.array([[0.25, 0.15, 0.0], [0.25, -0.15, 0.0]]),
        np.array([[-0.25, 0.15, 0.0], [-0.25, -0.15, 0.0]]),
    )
    payload = PayloadParams(mass=1.5, inertia=np.diag([0.0125, 0.0325, 0.0425]))
    return TeamParams(payload=payload, agents=(agent(), agent()), attachments=attachments)


def _hover_inputs(params):
    share = params.payload.mass / params.n_agents
    u = np.array([(a.mass + share) * 9.81 for a in params.agents])
    return InputSet(u=u, tau=np.zeros((2, 3)), tau_r=np.zeros((2, 2)))


def _init_state(params, v_L=None, om_L=None, R_L=None):
    payload = PayloadState(
        p=np.array([0.0, 0.0, 1.0]),
        v=np.zeros(3) if v_L is None else v_L,
        R=np.eye(3) if R_L is None else R_L,
        omega=np.zeros(3) if om_L is None else om_L,
    )
    return consistent_init(params, payload)


def test_dimension_audit():
    dims = dimension_audit(_team())
    assert dims["differential"] == 44
    assert dims["algebraic"] == 12
    assert dims["velocity"] == 22


def test_grasp_matrix_shape_rank_and_action():
    params = _team()
    rng = np.random.default_rng(0)
    for _ in range(20):
        R_L = exp_so3(rng.normal(size=3))
        G = grasp_matrix(params, R_L)
        assert G.shape == (6, 12)
        assert np.linalg.matrix_rank(G) == 6
        lam = rng.normal(size=(4, 3))
        W = G @ lam.ravel()
        assert np.allclose(W[:3], lam.sum(axis=0), atol=1e-12)
        torque = sum(np.cross(R_L @ c, f) for c, f in zip(params.attachment_stack(), lam))
        assert np.allclose(W[3:], torque, atol=1e-12)


def test_consistent_init_zeroes_constraints():
    params = _team()
    rng = np.random.default_rng(1)
    for _ in range(5):
        payload = PayloadState(
            p=rng.normal(size=3),
            v=0.3 * rng.normal(size=3),
            R=exp_so3(0.2 * rng.normal(size=3)),
            omega=0.3 * rng.normal(size=3),
        )
        state = consistent_init(params, payload)
        assert np.linalg.norm(constraint_residual(params, state)) < 1e-10
        assert np.linalg.norm(constraint_velocity(params, state)) < 1e-10


def test_constraint_jacobian_finite_difference():
    params = _team()
    state = _init_state(params, v_L=np.array([0.1, -0.05, 0.02]), om_L=np.array([0.05, 0.1, -0.02]))
    D = constraint_jacobian(params, state)
    h = 1e-6

    def phi_of(perturb):
        st = state.copy()
        perturb(st)
        return constraint_residual(params, st)

    col = 0
    for j in range(2):
        for k in range(3):  # agent omega directions
            d = np.zeros(3); d[k] = 1.0
            def up(st, j=j, d=d, s=1.0):
                st.agents[j].R = st.agents[j].R @ exp_so3(s * h * d)
            fd = (phi_of(lambda st: up(st, s=1.0)) - phi_of(lambda st: up(st, s=-1.0))) / (2 * h)
            assert np.allclose(fd, D[:, col], atol=1e-6)
            col += 1
        for k in range(3):  # agent translation
            d = np.zeros(3); d[k] = 1.0
            def up(st, j=j, d=d, s=1.0):
                st.agents[j].x = st.agents[j].x + s * h * d
            fd = (phi_of(lambda st: up(st, s=1.0)) - phi_of(lambda st: up(st, s=-1.0))) / (2 * h)
            assert np.allclose(fd, D[:, col], atol=1e-6)
            col += 1
        for k in range(2):  # agent joints
            d = np.zeros(2); d[k] = 1.0
            def up(st, j=j, d=d, s=1.0):
                st.agents[j].r = st.agents[j].r + s * h * d
            fd = (phi_of(lambda st: up(st, s=1.0)) - phi_of(lambda st: up(st, s=-1.0))) / (2 * h)
            assert np.allclose(fd, D[:, col], atol=1e-6)
            col += 1
    for k in range(3):  # payload translation
        d = np.zeros(3); d[k] = 1.0
        def up(st, d=d, s=1.0):
            st.payload.p = st.payload.p + s * h * d
        fd = (phi_of(lambda st: up(st, s=1.0)) - phi_of(lambda st: up(st, s=-1.0))) / (2 * h)
        assert np.allclose(fd, D[:, col], atol=1e-6)
        col += 1
    for k in range(3):  # payload rotation
        d = np.zeros(3); d[k] = 1.0
        def up(st, d=d, s=1.0):
            st.payload.R = st.payload.R @ exp_so3(s * h * d)
        fd = (phi_of(lambda st: up(st, s=1.0)) - phi_of(lambda st: up(st, s=-1.0))) / (2 * h)
        assert np.allclose(fd, D[:, col], atol=1e-6)
        col += 1


def test_accel_bias_zero_at_rest():
    params = _team()
    state = _init_state(params)
    assert np.linalg.norm(constraint_accel_bias(params, state)) < 1e-14


def test_accel_bias_matches_numerical_second_derivative():
    # b = Phi_dd - D @ accel measured along a short integrated trajectory
    params = _team()
    state = _init_state(params, v_L=np.array([0.2, 0.1, -0.05]), om_L=np.array([0.3, -0.2, 0.4]))
    inputs = _hover_inputs(params)
    h = 1e-5
    states = [state]
    for _ in range(2):
        nxt, _ = rk4_step(params, states[-1], inputs, t=0.0, h=h)
        states.append(nxt)
    phis = [constraint_residual(params, s) for s in states]
    vels = [stacked_velocities(params, s) for s in states]
    phi_dd = (phis[2] - 2 * phis[1] + phis[0]) / h**2
    accel = (vels[2] - vels[0]) / (2 * h)
    D = constraint_jacobian(params, states[1])
    b = constraint_accel_bias(params, states[1])
    assert np.allclose(phi_dd, D @ accel + b, atol=1e-4)


def test_contact_solve_against_dense_kkt():
    params = _team()
    rng = np.random.default_rng(2)
    for trial in range(5):
        state = _init_state(
            params,
            v_L=0.3 * rng.normal(size=3),
            om_L=0.3 * rng.normal(size=3),
            R_L=exp_so3(0.2 * rng.normal(size=3)),
        )
        inputs = InputSet(
            u=18.0 + rng.normal(size=2),
            tau=0.05 * rng.normal(size=(2, 3)),
            tau_r=0.01 * rng.normal(size=(2, 2)),
        )
        alpha = 20.0
        lam, info = solve_contact_forces(params, state, inputs, alpha=alpha)
        assert info["residual"] < 1e-10

        # dense KKT assembly as an independent oracle
        n_vel = 22
        M = np.zeros((n_vel, n_vel))
        hvec = np.zeros(n_vel)
        off = 0
        for j, a in enumerate(params.agents):
            s = state.agents[j]
            blocks = mass_blocks(a, s.r)
            Mbar = reduced_mass(blocks)
            idx = np.r_[off:off + 3, off + 6:off + 8]
            M[np.ix_(idx, idx)] = Mbar
            M[off + 3:off + 6, off + 3:off + 6] = blocks.mass * np.eye(3)
            from cooplift.agent import d_reduced_mass, quadratic_mass_term

            xi = np.concatenate([s.omega, s.rdot])
            Mbar_dot = np.tensordot(s.rdot, d_reduced_mass(a, s.r), axes=(0, 0))
            thrust = np.array([0.0, 0.0, inputs.u[j]])
            g_mu = np.cross(s.mu, s.omega) + inputs.tau[j] - blocks.C.T @ thrust / blocks.mass
            g_nu = quadratic_mass_term(a, s.r, s.omega, s.rdot) + inputs.tau_r[j] \
                - blocks.M_v_r.T @ thrust / blocks.mass
            g = np.concatenate([g_mu, g_nu]) - Mbar_dot @ xi
            hvec[idx] = g
            hvec[off + 3:off + 6] = blocks.mass * params.gravity + state.agents[j].R @ thrust
            off += 8
        mL, JL = params.payload.mass, params.payload.inertia
        M[16:19, 16:19] = mL * np.eye(3)
        M[19:22, 19:22] = JL
        hvec[16:19] = mL * params.gravity
        pl = state.payload
        hvec[19:22] = -np.cross(pl.omega, JL @ pl.omega)

        D = constraint_jacobian(params, state)
        phi = constraint_residual(params, state)
        phidot = D @ stacked_velocities(params, state)
        bias = constraint_accel_bias(params, state)
        KKT = np.block([[M, D.T], [D, np.zeros((12, 12))]])
        rhs = np.concatenate([hvec, -(bias + 2 * alpha * phidot + alpha**2 * phi)])
        sol = np.linalg.solve(KKT, rhs)
        lam_oracle = sol[n_vel:].reshape(-1, 3)
        assert np.max(np.abs(lam - lam_oracle)) < 1e-10


def test_static_hover_forces_support_the_weight():
    # at rest with exact hover thrust the pins carry exactly the payload
    # weight; with zero joint torques each pin also carries a lateral squeeze
    # that balances the free-swinging arm, mirrored across the symmetry plane
    params = _team()
    state = _init_state(params)
    lam, _ = solve_contact_forces(params, state, _hover_inputs(params))
    total = lam.sum(axis=0)
    assert np.allclose(total, [0.0, 0.0, params.payload.mass * 9.81], atol=1e-9)
    # equal vertical shares and mirrored lateral components
    for k in range(4):
        assert abs(lam[k, 0]) < 1e-9
        assert abs(lam[k, 2] - params.payload.mass * 9.81 / 4) < 1e-9
    assert abs(lam[0, 1] + lam[1, 1]) < 1e-9
    assert abs(lam[0, 1] - lam[2, 1]) < 1e-9


def test_baumgarte_keeps_constraints_tight():
    params = _team()
    state = _init_state(params)
    inputs = _hover_inputs(params)
    max_phi = 0.0
    t = 0.0
    for k in range(1000):
        state, _ = rk4_step(params, state, inputs, t=t, h=1e-3)
        t += 1e-3
        if k % 50 == 0:
            max_phi = max(max_phi, np.linalg.norm(constraint_residual(params, state)))
    assert max_phi < 1e-8


def test_free_fall_conserves_energy_and_momentum():
    params = _team()
    state = _init_state(params, v_L=np.array([0.2, -0.1, 0.0]), om_L=np.array([0.2, 0.3, -0.1]))
    inputs = InputSet(u=np.zeros(2), tau=np.zeros((2, 3)), tau_r=np.zeros((2, 2)))
    E0 = total_energy(params, state)
    t = 0.0
    for _ in range(1000):
        state, _ = rk4_step(params, state, inputs, t=t, h=5e-4)
        t += 5e-4
    assert abs(total_energy(params, state) - E0) < 1e-6


def test_rk4_fourth_order_richardson():
    params = _team()
    inputs = _hover_inputs(params)
    inputs = InputSet(u=inputs.u + np.array([0.4, -0.3]), tau=np.full((2, 3), 0.002), tau_r=np.zeros((2, 2)))

    def run(h, steps):
        state = _init_state(params, v_L=np.array([0.05, 0.0, 0.0]))
        t = 0.0
        for _ in range(steps):
            state, _ = rk4_step(params, state, inputs, t=t, h=h)
            t += h
        return pack(params, state)

    zh = run(4e-3, 125)
    zh2 = run(2e-3, 250)
    zh4 = run(1e-3, 500)
    e1 = np.linalg.norm(zh - zh2)
    e2 = np.linalg.norm(zh2 - zh4)
    ratio = e1 / e2
    assert 8.0 < ratio < 40.0


def test_project_constraints_restores_manifold():
    params = _team()
    rng = np.random.default_rng(3)
    state = _init_state(params, v_L=np.array([0.1, 0.0, 0.0]))
    # perturb the agents off the manifold
    for s in state.agents:
        s.x = s.x + 1e-5 * rng.normal(size=3)
        s.r = s.r + 1e-5 * rng.normal(size=2)
        s.v = s.v + 1e-5 * rng.normal(size=3)
    assert np.linalg.norm(constraint_residual(params, state)) > 1e-6
    fixed = project_constraints(params, state)
    assert np.linalg.norm(constraint_residual(params, fixed)) < 1e-10
    assert np.linalg.norm(constraint_velocity(params, fixed)) < 1e-10


def test_pack_unpack_round_trip():
    params = _team()
    state = _init_state(params, v_L=np.array([0.1, -0.2, 0.05]), om_L=np.array([0.1, 0.2, 0.3]))
    y = pack(params, state)
    back = unpack(params, y)
    assert np.allclose(pack(params, back), y, atol=1e-14)
    assert back.agents[0].momentum_residual(params.agents[0]) < 1e-12


def test_multiplier_work_vanishes_on_manifold():
    # constraint forces do no work against constraint-consistent velocities
    params = _team()
    state = _init_state(params, v_L=np.array([0.3, 0.1, -0.1]), om_L=np.array([0.2, -0.1, 0.3]))
    lam, info = solve_contact_forces(params, state, _hover_inputs(params))
    D = constraint_jacobian(params, state)
    vel = stacked_velocities(params, state)
    power = lam.ravel() @ (D @ vel)
    assert abs(power) < 1e-9
