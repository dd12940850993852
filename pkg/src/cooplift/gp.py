"""Gaussian-process disturbance models, confidence bounds, and training labels.

Independent RBF-ARD regressors per output channel, with the residual-based
label construction that turns logged trajectories into supervised data and
the scaled posterior deviation used by the learning controller.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, solve_triangular
from scipy.optimize import minimize

from .agent import contact_jacobians_T, mass_blocks, quadratic_mass_term
from .coupled import GRAVITY

JITTER = 1e-10
LENGTHSCALE_BOUNDS = (1e-3, 1e3)


@dataclass(frozen=True)
class KernelParams:
    """Squared-exponential kernel with per-dimension length-scales."""

    signal_var: float
    lengthscales: np.ndarray
    noise_var: float


def kernel_eval(params: KernelParams, x1, x2) -> float:
    d = (np.asarray(x1, dtype=float) - np.asarray(x2, dtype=float)) / params.lengthscales
    return params.signal_var * float(np.exp(-0.5 * (d @ d)))


def kernel_matrix(params: KernelParams, X, X2=None) -> np.ndarray:
    """Gram matrix of the noise-free kernel between X and X2 (defaults to X)."""
    A = np.asarray(X, dtype=float) / params.lengthscales
    B = A if X2 is None else np.asarray(X2, dtype=float) / params.lengthscales
    sq = ((A[:, None, :] - B[None, :, :]) ** 2).sum(axis=2)
    return params.signal_var * np.exp(-0.5 * sq)


class GPModel:
    """Per-channel GP posteriors over a shared input set.

    An empty dataset is valid and yields the prior (zero mean, signal
    variance). Factorizations are computed once at construction.
    """

    def __init__(self, kernels, X, Y, jitter: float = JITTER):
        self.kernels = list(kernels)
        self.X = np.array(X, dtype=float)
        self.Y = np.array(Y, dtype=float)
        if self.X.ndim != 2:
            raise ValueError("X must be (N, d)")
        if self.Y.shape != (len(self.X), len(self.kernels)):
            raise ValueError("Y must be (N, channels)")
        self.jitter = float(jitter)
        self._chol = []
        self._alpha = []
        N = len(self.X)
        eye = np.eye(N)
        for i, p in enumerate(self.kernels):
            if N == 0:
                self._chol.append(None)
                self._alpha.append(None)
                continue
            K = kernel_matrix(p, self.X) + (p.noise_var + self.jitter) * eye
            L = np.linalg.cholesky(K)
            self._chol.append(L)
            self._alpha.append(cho_solve((L, True), self.Y[:, i]))

    @property
    def N(self) -> int:
        return len(self.X)

    @property
    def channels(self) -> int:
        return len(self.kernels)

    def posterior(self, Xq):
        """Posterior mean and variance per channel.

        Accepts a single point (d,) or a batch (Q, d); returns arrays shaped
        (channels,) or (Q, channels) to match.
        """
        Xq = np.asarray(Xq, dtype=float)
        single = Xq.ndim == 1
        Xb = Xq[None, :] if single else Xq
        Q = len(Xb)
        mean = np.zeros((Q, self.channels))
        var = np.empty((Q, self.channels))
        for i, p in enumerate(self.kernels):
            if self._chol[i] is None:
                var[:, i] = p.signal_var
                continue
            Ks = kernel_matrix(p, Xb, self.X)
            mean[:, i] = Ks @ self._alpha[i]
            V = solve_triangular(self._chol[i], Ks.T, lower=True)
            var[:, i] = np.maximum(p.signal_var - np.einsum("nq,nq->q", V, V), 0.0)
        if single:
            return mean[0], var[0]
        return mean, var


# ---------------------------------------------------------------------------
# hyperparameter fitting


def log_marginal_likelihood(params: KernelParams, X, y, jitter: float = JITTER) -> float:
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    N = len(X)
    K = kernel_matrix(params, X) + (params.noise_var + jitter) * np.eye(N)
    L = np.linalg.cholesky(K)
    alpha = cho_solve((L, True), y)
    return float(-0.5 * y @ alpha - np.log(np.diag(L)).sum() - 0.5 * N * np.log(2.0 * np.pi))


def initial_kernel(X, y) -> KernelParams:
    """Data-scaled starting kernel for the marginal-likelihood search."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    spread = np.std(X, axis=0)
    ls = np.clip(np.where(spread > 0.0, spread, 1.0), *LENGTHSCALE_BOUNDS)
    vy = float(np.var(y))
    return KernelParams(signal_var=max(vy, 1e-6), lengthscales=ls,
                        noise_var=max(0.1 * vy, 1e-6))


def _neg_lml(theta, sqd, y, jitter):
    # theta = [log ls_1..d, log signal_var, log noise_var]
    N = len(y)
    d = sqd.shape[2]
    ls2 = np.exp(2.0 * theta[:d])
    sf2 = np.exp(theta[d])
    noise = np.exp(theta[d + 1])
    E = np.einsum("abd,d->ab", sqd, 0.5 / ls2)
    Kf = sf2 * np.exp(-E)
    K = Kf + (noise + jitter) * np.eye(N)
    try:
        L = np.linalg.cholesky(K)
    except np.linalg.LinAlgError:
        return 1e12, np.zeros_like(theta)
    alpha = cho_solve((L, True), y)
    lml = -0.5 * y @ alpha - np.log(np.diag(L)).sum() - 0.5 * N * np.log(2.0 * np.pi)
    A = np.outer(alpha, alpha) - cho_solve((L, True), np.eye(N))
    AK = A * Kf
    g = np.empty_like(theta)
    g[:d] = 0.5 * np.einsum("ab,abd->d", AK, sqd) / ls2
    g[d] = 0.5 * AK.sum()
    g[d + 1] = 0.5 * noise * np.trace(A)
    return -lml, -g


def fit_hyperparameters(X, Y, restarts: int = 4, maxiter: int = 40,
                        rng=None, jitter: float = JITTER,
                        ls_bounds=LENGTHSCALE_BOUNDS):
    """Maximize the marginal likelihood per channel in log-parameter space.

    Multi-start L-BFGS-B from a data-scaled kernel plus random perturbations.
    The returned kernel never scores below the starting one; if every start
    fails a warning is raised and the initial kernel is kept.
    """
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    N, d = X.shape
    if N < 5:
        raise ValueError("hyperparameter fitting needs at least 5 samples")
    rng = np.random.default_rng() if rng is None else rng
    diff = X[:, None, :] - X[None, :, :]
    sqd = diff * diff
    lb = np.concatenate([np.full(d, np.log(ls_bounds[0])),
                         [np.log(1e-10), np.log(1e-10)]])
    ub = np.concatenate([np.full(d, np.log(ls_bounds[1])),
                         [np.log(1e8), np.log(1e4)]])
    bounds = list(zip(lb, ub))
    fitted = []
    for c in range(Y.shape[1]):
        y = Y[:, c]
        p0 = initial_kernel(X, y)
        th0 = np.clip(np.concatenate([np.log(p0.lengthscales),
                                      [np.log(p0.signal_var), np.log(p0.noise_var)]]), lb, ub)
        base = -_neg_lml(th0, sqd, y, jitter)[0]
        starts = [th0] + [np.clip(th0 + rng.normal(size=len(th0)), lb, ub)
                          for _ in range(restarts)]
        best_val, best_th = -np.inf, None
        for s in starts:
            res = minimize(_neg_lml, s, args=(sqd, y, jitter), jac=True,
                           method="L-BFGS-B", bounds=bounds,
                           options={"maxiter": maxiter})
            if np.isfinite(res.fun) and -res.fun > best_val:
                best_val, best_th = -res.fun, res.x
        if best_th is None or best_val < base - 1e-9:
            warnings.warn("hyperparameter fit did not improve the marginal "
                          "likelihood; keeping the data-scaled kernel")
            fitted.append(p0)
        else:
            fitted.append(KernelParams(signal_var=float(np.exp(best_th[d])),
                                       lengthscales=np.exp(best_th[:d]),
                                       noise_var=float(np.exp(best_th[d + 1]))))
    return fitted


# ---------------------------------------------------------------------------
# confidence bounds


def info_gain(model: GPModel) -> np.ndarray:
    """Information gain of each channel's dataset under its own kernel."""
    out = np.zeros(model.channels)
    for i, p in enumerate(model.kernels):
        L = model._chol[i]
        if L is None:
            continue
        sigma2 = p.noise_var + model.jitter
        out[i] = float(np.log(np.diag(L)).sum() - 0.5 * model.N * np.log(sigma2))
    return out


def beta(delta: float, B: float, gamma, N: int, channels: int) -> np.ndarray:
    """Per-channel confidence scaling for a joint level 1 - delta."""
    if not 0.0 < delta < 1.0:
        raise ValueError("delta must lie strictly inside (0, 1)")
    if channels not in (6, 9):
        raise ValueError("channels must be 9 (agent model) or 6 (payload model)")
    gamma = np.asarray(gamma, dtype=float)
    ln = np.log((N + 1) / (1.0 - delta ** (1.0 / channels)))
    return np.sqrt(2.0 * B ** 2 + 300.0 * gamma * ln ** 3)


def rkhs_norm_estimate(model: GPModel) -> np.ndarray:
    """Norm proxy sqrt(alpha' Kf alpha) of each channel's posterior mean."""
    out = np.zeros(model.channels)
    for i, p in enumerate(model.kernels):
        a = model._alpha[i]
        if a is None:
            continue
        q = float(model.Y[:, i] @ a - (p.noise_var + model.jitter) * (a @ a))
        out[i] = np.sqrt(max(q, 0.0))
    return out


@dataclass(frozen=True)
class ConfidenceBound:
    beta: np.ndarray
    delta: float
    B: float


def confidence_bound(model: GPModel, delta: float, B=None, channels: int = 9) -> ConfidenceBound:
    if B is None:
        B = 2.0 * float(rkhs_norm_estimate(model).max(initial=0.0))
    b = beta(delta, float(B), info_gain(model), model.N, channels)
    return ConfidenceBound(beta=b, delta=float(delta), B=float(B))


def rho(model: GPModel, bound: ConfidenceBound, x) -> float:
    """Combined posterior deviation radius at one query point."""
    _, var = model.posterior(np.asarray(x, dtype=float))
    return float(np.linalg.norm(bound.beta * np.sqrt(var)))


def rho_trace(model: GPModel, bound: ConfidenceBound, Xq) -> np.ndarray:
    _, var = model.posterior(np.asarray(Xq, dtype=float))
    return np.linalg.norm(bound.beta * np.sqrt(var), axis=1)


# ---------------------------------------------------------------------------
# training labels from logged trajectories


def agent_feature(state) -> np.ndarray:
    return np.concatenate([state.R.ravel(), state.x, state.r,
                           state.omega, state.v, state.rdot])


def payload_feature(state, p_ref) -> np.ndarray:
    return np.concatenate([state.p, state.v, state.R.ravel(),
                           state.omega, state.p - np.asarray(p_ref, dtype=float)])


def label_agent(params, states, u, tau, tau_r, lam_hat, h: float,
                noise_std: float = 0.0, rng=None, gravity=GRAVITY):
    """Disturbance labels for one agent from a logged state sequence.

    Central differences of the momenta over the interior instants isolate the
    unmodeled generalized forces; rows are [translation(3), rotation(3),
    joints(n)]. lam_hat carries the contact-force estimate used to strip the
    coupling terms.
    """
    T = len(states)
    u = np.asarray(u, dtype=float)
    tau = np.asarray(tau, dtype=float)
    tau_r = np.asarray(tau_r, dtype=float)
    lam_hat = np.asarray(lam_hat, dtype=float)
    gravity = np.asarray(gravity, dtype=float)
    n = params.n_joints
    m = params.mass
    X = np.empty((T - 2, 18 + 2 * n))
    Y = np.empty((T - 2, 6 + n))
    for i, k in enumerate(range(1, T - 1)):
        s = states[k]
        vdot = (states[k + 1].v - states[k - 1].v) / (2.0 * h)
        mudot = (states[k + 1].mu - states[k - 1].mu) / (2.0 * h)
        nudot = (states[k + 1].nu - states[k - 1].nu) / (2.0 * h)
        blocks = mass_blocks(params, s.r)
        JcT = contact_jacobians_T(params, s.r, s.R)
        gen = np.einsum("bij,bj->i", JcT, lam_hat[k])
        y_x = m * vdot - m * gravity - u[k] * s.R[:, 2] + lam_hat[k].sum(axis=0)
        y_om = (mudot - np.cross(s.mu, s.omega) - tau[k]
                + (u[k] / m) * blocks.C[2] + gen[:3])
        y_r = (nudot - quadratic_mass_term(params, s.r, s.omega, s.rdot)
               - tau_r[k] + (u[k] / m) * blocks.M_v_r[2] + gen[3:])
        X[i] = agent_feature(s)
        Y[i] = np.concatenate([y_x, y_om, y_r])
    if noise_std > 0.0:
        rng = np.random.default_rng() if rng is None else rng
        Y = Y + noise_std * rng.standard_normal(Y.shape)
    return X, Y


def label_payload(payload_params, states, lam_hat, attachments, p_ref, h: float,
                  noise_std: float = 0.0, rng=None, gravity=GRAVITY):
    """Disturbance labels for the payload: [force(3), body torque(3)] rows."""
    T = len(states)
    lam_hat = np.asarray(lam_hat, dtype=float)
    attachments = np.asarray(attachments, dtype=float)
    p_ref = np.asarray(p_ref, dtype=float)
    gravity = np.asarray(gravity, dtype=float)
    m = payload_params.mass
    J = payload_params.inertia
    X = np.empty((T - 2, 21))
    Y = np.empty((T - 2, 6))
    for i, k in enumerate(range(1, T - 1)):
        s = states[k]
        vdot = (states[k + 1].v - states[k - 1].v) / (2.0 * h)
        omdot = (states[k + 1].omega - states[k - 1].omega) / (2.0 * h)
        y_p = m * vdot - lam_hat[k].sum(axis=0) - m * gravity
        lam_body = lam_hat[k] @ s.R
        torque = np.cross(attachments, lam_body).sum(axis=0)
        y_om = J @ omdot + np.cross(s.omega, J @ s.omega) - torque
        X[i] = payload_feature(s, p_ref[k])
        Y[i] = np.concatenate([y_p, y_om])
    if noise_std > 0.0:
        rng = np.random.default_rng() if rng is None else rng
        Y = Y + noise_std * rng.standard_normal(Y.shape)
    return X, Y


# ---------------------------------------------------------------------------
# dataset freezing


def farthest_point_indices(X, budget: int) -> np.ndarray:
    """Deterministic farthest-point subset, seeded at the first sample."""
    X = np.asarray(X, dtype=float)
    n = len(X)
    if budget >= n:
        return np.arange(n)
    chosen = [0]
    d2 = ((X - X[0]) ** 2).sum(axis=1)
    for _ in range(budget - 1):
        nxt = int(np.argmax(d2))
        chosen.append(nxt)
        d2 = np.minimum(d2, ((X - X[nxt]) ** 2).sum(axis=1))
    return np.sort(np.array(chosen))


def schedule_datasets(t, X, Y, update_times, budget: int):
    """Freeze the sample stream at each update time and subsample to budget.

    Returns [(t_k, X_k, Y_k), ...]; only samples with t <= t_k enter the
    k-th frozen set, so later data can never touch an earlier model.
    """
    t = np.asarray(t, dtype=float)
    X = np.asarray(X, dtype=float)
    Y = np.asarray(Y, dtype=float)
    out = []
    for tk in update_times:
        mask = t <= tk
        Xm, Ym = X[mask], Y[mask]
        idx = farthest_point_indices(Xm, budget)
        out.append((float(tk), Xm[idx], Ym[idx]))
    return out
