"""UCB and batched-UCB acquisition, and their maximization over a search space.

The batch form is the reparameterized Monte-Carlo estimate of
E[max_j phi(alpha_j)]: per posterior draw, joint samples are written as
mu + L gamma with fixed base normals gamma, and each candidate scores
mu_j + lambda * sqrt(pi/2) * |(L gamma)_j|. The sqrt(pi/2) factor makes the
q=1 estimator agree with plain UCB (E|gamma| = sqrt(2/pi)). Base samples are
drawn once per optimization and held fixed, so the objective is smooth and
deterministic and bound-constrained quasi-Newton ascent applies.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cholesky, solve_triangular
from scipy.optimize import minimize

from .core import CappedSimplex, Hypercube, MergeCoefficients, SearchSpace
from .simplex import (
    StickBreakInput,
    random_orderings,
    stick_break_batch,
    stick_break_jacobian,
)
from .surrogate import (
    PosteriorMixture,
    chol_with_jitter,
    matern52,
    matern52_h,
    pairwise_sq_dist,
)

HALF_PI_FACTOR = math.sqrt(math.pi / 2.0)
BASE_JITTER = 1e-12  # fixed diagonal added to every joint batch covariance


@dataclass
class AcquisitionConfig:
    ucb_lambda: float = 9.0
    q: int = 8
    raw_samples: int = 1024
    restarts: int = 20
    mc_base_samples: int = 128
    clamp_eps: float = 1e-4
    round_eps: float = 1e-2
    ascent_maxiter: int = 30

    def __post_init__(self):
        if self.q < 1:
            raise ValueError("q must be >= 1")
        if self.raw_samples < self.restarts:
            raise ValueError("raw_samples must be >= restarts")


@dataclass
class AcquiredBatch:
    """Result of one batch acquisition round."""

    points: list[MergeCoefficients]
    value: float
    raw_value: float
    ascent_failed: bool

    def __iter__(self):
        return iter(self.points)

    def __len__(self):
        return len(self.points)


def ucb(posterior: PosteriorMixture, alpha: MergeCoefficients, ucb_lambda: float) -> float:
    """Mixture mean plus lambda times mixture standard deviation."""
    pred = posterior.predict(alpha.values[None, :])
    return float(pred.mixture_mean[0] + ucb_lambda * math.sqrt(pred.mixture_variance[0]))


def _draw_moments(fitted, x: np.ndarray, batch: np.ndarray):
    """Posterior mean and joint (noiseless) covariance of `batch` under one draw."""
    hyper = fitted.hyper
    rho = hyper.inv_sq_lengthscales
    a = matern52(pairwise_sq_dist(batch, x, rho), hyper.signal_variance)
    mean = a @ fitted.weights
    w = solve_triangular(fitted.chol, a.T, lower=True, check_finite=False)
    kqq = matern52(pairwise_sq_dist(batch, batch, rho), hyper.signal_variance)
    cov = kqq - w.T @ w
    cov[np.diag_indices_from(cov)] += BASE_JITTER + 1e-10 * hyper.signal_variance
    return a, w, mean, cov


def qucb_batch(
    posterior: PosteriorMixture,
    batch: np.ndarray,
    base_samples: np.ndarray,
    ucb_lambda: float,
) -> float:
    """Monte-Carlo batch acquisition value for one candidate batch (q, n).

    `base_samples` is (mc, q) standard normal, fixed by the caller.
    Deterministic given the base samples.
    """
    batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    base = np.atleast_2d(np.asarray(base_samples, dtype=np.float64))
    if base.shape[1] != batch.shape[0]:
        raise ValueError("base_samples second dimension must equal batch size q")
    c = ucb_lambda * HALF_PI_FACTOR
    total = 0.0
    for f in posterior.fitted:
        _, _, mean, cov = _draw_moments(f, posterior.x, batch)
        low, _ = chol_with_jitter(cov)
        y = base @ low.T
        vals = mean[None, :] + c * np.abs(y)
        total += vals.max(axis=1).mean()
    return float(total / posterior.n_draws)


def _qucb_values_many(
    posterior: PosteriorMixture,
    batches: np.ndarray,
    base_samples: np.ndarray,
    ucb_lambda: float,
) -> np.ndarray:
    """Vectorized qucb_batch over a stack of batches (S, q, n) -> (S,)."""
    s, q, n = batches.shape
    pts = batches.reshape(s * q, n)
    base = base_samples
    c = ucb_lambda * HALF_PI_FACTOR
    totals = np.zeros(s)
    for f in posterior.fitted:
        hyper = f.hyper
        rho = hyper.inv_sq_lengthscales
        a = matern52(pairwise_sq_dist(pts, posterior.x, rho), hyper.signal_variance)
        means = (a @ f.weights).reshape(s, q)
        w = solve_triangular(f.chol, a.T, lower=True, check_finite=False)
        wt = np.ascontiguousarray(w.reshape(-1, s, q).transpose(1, 0, 2))  # (S, M, q)
        diffs = batches[:, :, None, :] - batches[:, None, :, :]
        rsq = np.einsum("sqpn,n->sqp", diffs * diffs, rho)
        kqq = matern52(rsq, hyper.signal_variance)
        cov = kqq - wt.transpose(0, 2, 1) @ wt
        idx = np.arange(q)
        cov[:, idx, idx] += BASE_JITTER + 1e-10 * hyper.signal_variance
        try:
            lows = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            lows = np.empty_like(cov)
            for i in range(s):
                lows[i], _ = chol_with_jitter(cov[i])
        y = base[None, :, :] @ lows.transpose(0, 2, 1)  # (S, mc, q)
        vals = means[:, None, :] + c * np.abs(y)
        totals += vals.max(axis=2).mean(axis=1)
    return totals / posterior.n_draws


def _phi_mask(mat: np.ndarray) -> np.ndarray:
    out = np.tril(mat)
    out[np.diag_indices_from(out)] *= 0.5
    return out


def _qucb_value_grad(
    posterior: PosteriorMixture,
    batch: np.ndarray,
    base_samples: np.ndarray,
    ucb_lambda: float,
):
    """Acquisition value and its gradient with respect to the batch, (q, n).

    The covariance term backpropagates through the Cholesky factor with the
    standard triangular pullback; the mean term uses the analytic Matern-5/2
    derivative. Kinks of max/abs get a measure-zero subgradient.
    """
    batch = np.atleast_2d(np.asarray(batch, dtype=np.float64))
    base = np.atleast_2d(np.asarray(base_samples, dtype=np.float64))
    q = batch.shape[0]
    mc = base.shape[0]
    c = ucb_lambda * HALF_PI_FACTOR
    x = posterior.x
    total = 0.0
    grad = np.zeros_like(batch)
    rows = np.arange(mc)
    for f in posterior.fitted:
        hyper = f.hyper
        rho = hyper.inv_sq_lengthscales
        rsq_ax = pairwise_sq_dist(batch, x, rho)
        a = matern52(rsq_ax, hyper.signal_variance)
        mean = a @ f.weights
        w = solve_triangular(f.chol, a.T, lower=True, check_finite=False)
        rsq_kk = pairwise_sq_dist(batch, batch, rho)
        cov = matern52(rsq_kk, hyper.signal_variance) - w.T @ w
        cov[np.diag_indices_from(cov)] += BASE_JITTER + 1e-10 * hyper.signal_variance
        low, _ = chol_with_jitter(cov)
        y = base @ low.T
        vals = mean[None, :] + c * np.abs(y)
        jstar = vals.argmax(axis=1)
        total += vals[rows, jstar].mean()

        # Mean term: how often each candidate wins.
        counts = np.bincount(jstar, minlength=q) / mc
        h_ax = matern52_h(rsq_ax, hyper.signal_variance)
        d_a = -h_ax[:, :, None] * rho[None, None, :] * (
            batch[:, None, :] - x[None, :, :]
        )  # (q, M, n)
        grad_d = counts[:, None] * np.einsum("jmi,m->ji", d_a, f.weights)

        # Covariance term: adjoint of the Cholesky factor, then of Sigma.
        sel = np.zeros((mc, q))
        sel[rows, jstar] = np.sign(y[rows, jstar])
        l_bar = (c / mc) * (sel.T @ base)
        p_mat = _phi_mask(low.T @ l_bar)
        tmp = solve_triangular(low.T, p_mat, lower=False, check_finite=False)
        c_mat = solve_triangular(
            low.T, tmp.T, lower=False, check_finite=False
        ).T  # L^-T P L^-1
        sigma_bar = 0.5 * (c_mat + c_mat.T)

        h_kk = matern52_h(rsq_kk, hyper.signal_variance)
        d_k = -h_kk[:, :, None] * rho[None, None, :] * (
            batch[:, None, :] - batch[None, :, :]
        )  # (q, q, n)
        p_train = solve_triangular(
            f.chol.T, w, lower=False, check_finite=False
        )  # (M, q) = (K + noise)^-1 k(X, batch)
        t_tensor = d_k - np.einsum("jmi,mb->jbi", d_a, p_train)
        grad_d += 2.0 * np.einsum("jb,jbi->ji", sigma_bar, t_tensor)
        grad += grad_d
    h_draws = posterior.n_draws
    return float(total / h_draws), grad / h_draws


def _round_coefficients(
    alpha: np.ndarray, space: SearchSpace, round_eps: float
) -> np.ndarray:
    """Snap coordinates near 0 to 0 and near 1 to 1. Rounding up never breaks
    the simplex cap: candidates are applied largest-first and skipped when the
    total would exceed the bound."""
    out = alpha.copy()
    out[out < round_eps] = 0.0
    near_one = out > 1.0 - round_eps
    if isinstance(space, CappedSimplex):
        for j in np.argsort(-out):
            if near_one[j] and out[j] < 1.0:
                bumped = out.sum() - out[j] + 1.0
                if bumped <= space.bound + 1e-12:
                    out[j] = 1.0
    else:
        out[near_one] = 1.0
    return out


def optimize_batch(
    posterior: PosteriorMixture,
    space: SearchSpace,
    config: AcquisitionConfig,
    rng: np.random.Generator,
) -> AcquiredBatch:
    """Maximize the batch acquisition over the search space.

    Screens `raw_samples` random candidate batches (stick-breaking starts on
    the capped simplex, uniform on the hypercube), ascends the best
    `restarts` of them with L-BFGS-B on the latent variables (chain rule
    through the stick-breaking Jacobian on the simplex), and returns the best
    batch after clamping and 0/1 rounding.
    """
    n = space.n
    q = config.q
    base = rng.standard_normal((config.mc_base_samples, q))
    latents = rng.random((config.raw_samples, q, n))
    if isinstance(space, CappedSimplex):
        orderings = random_orderings(config.raw_samples * q, n, rng).reshape(
            config.raw_samples, q, n
        )
        alphas = stick_break_batch(
            latents.reshape(-1, n), orderings.reshape(-1, n), space.bound
        ).reshape(config.raw_samples, q, n)
    else:
        orderings = None
        alphas = latents

    raw_vals = _qucb_values_many(posterior, alphas, base, config.ucb_lambda)
    top = np.argsort(-raw_vals, kind="stable")[: config.restarts]

    lo, hi = config.clamp_eps, 1.0 - config.clamp_eps

    def latent_to_alpha(z: np.ndarray, ords: np.ndarray | None) -> np.ndarray:
        if ords is None:
            return z
        return stick_break_batch(z, ords, space.bound)

    def make_objective(ords):
        def fun(flat):
            z = flat.reshape(q, n)
            a = latent_to_alpha(z, ords)
            val, g_alpha = _qucb_value_grad(posterior, a, base, config.ucb_lambda)
            if ords is None:
                g = g_alpha
            else:
                g = np.empty_like(g_alpha)
                for j in range(q):
                    jac = stick_break_jacobian(
                        StickBreakInput(z[j], ords[j], space.bound)
                    )
                    g[j] = jac.T @ g_alpha[j]
            return -val, -g.ravel()

        return fun

    bounds = [(lo, hi)] * (q * n)
    best_val = -np.inf
    best_latent = None
    best_ords = None
    any_improved = False
    for si in top:
        ords = orderings[si] if orderings is not None else None
        objective = make_objective(ords)
        z0 = np.clip(latents[si], lo, hi)
        f0, _ = objective(z0.ravel())
        v0 = -f0
        res = minimize(
            objective,
            z0.ravel(),
            jac=True,
            method="L-BFGS-B",
            bounds=bounds,
            options={"maxiter": config.ascent_maxiter},
        )
        v1 = -float(res.fun)
        if v1 > v0 + 1e-12:
            any_improved = True
        if v1 >= v0:
            cand_val, cand_z = v1, res.x.reshape(q, n)
        else:
            cand_val, cand_z = v0, z0
        if cand_val > best_val:
            best_val, best_latent, best_ords = cand_val, cand_z, ords

    raw_best = float(raw_vals[top[0]])
    alpha_best = latent_to_alpha(best_latent, best_ords)
    points = []
    for j in range(q):
        rounded = _round_coefficients(alpha_best[j], space, config.round_eps)
        points.append(MergeCoefficients(np.clip(rounded, 0.0, 1.0)))
    return AcquiredBatch(
        points=points,
        value=best_val,
        raw_value=raw_best,
        ascent_failed=not any_improved,
    )
