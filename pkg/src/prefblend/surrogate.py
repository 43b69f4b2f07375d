"""Preference-based Gaussian-process surrogate.

Two-step inference: (1) latent per-sample utilities are recovered from
pairwise probit comparisons by Newton MAP under a fixed smooth reference
kernel; (2) kernel hyperparameters of a Matern-5/2 ARD GP get a fully
Bayesian treatment under a sparse axis-aligned shrinkage prior (half-Cauchy
global scale, half-Cauchy per-dimension inverse squared lengthscales),
sampled by adaptive univariate slice sampling over log-parameters. The
predictive posterior is a uniform mixture over the retained draws.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, cholesky, solve_triangular
from scipy.special import log_ndtr

LOG2PI = math.log(2.0 * math.pi)
SQRT5 = math.sqrt(5.0)

# Hyperprior constants. The shrinkage scales are the published defaults of
# the sparse axis-aligned prior; the lognormal signal/noise priors are
# centered for standardized targets (signal median 1, noise median e^-3).
GLOBAL_SHRINKAGE_SCALE = 0.1
LOG_SIGNAL_MEAN, LOG_SIGNAL_STD = 0.0, 1.0
LOG_NOISE_MEAN, LOG_NOISE_STD = -3.0, 1.0

MAX_JITTER = 1e-4


class MapInferenceError(RuntimeError):
    """Newton MAP failed to reach first-order optimality."""

    def __init__(self, message: str, last_values: np.ndarray):
        super().__init__(message)
        self.last_values = last_values


class KernelFactorizationError(RuntimeError):
    """Kernel matrix stayed non-positive-definite up to the jitter cap."""


# ---------------------------------------------------------------------------
# Matern-5/2 ARD kernel


def pairwise_sq_dist(a: np.ndarray, b: np.ndarray, inv_sq_ls: np.ndarray) -> np.ndarray:
    """Weighted squared distances sum_i rho_i (a_i - b_i)^2, shape (len(a), len(b))."""
    aw = a * np.sqrt(inv_sq_ls)
    bw = b * np.sqrt(inv_sq_ls)
    sq = (
        (aw * aw).sum(axis=1)[:, None]
        + (bw * bw).sum(axis=1)[None, :]
        - 2.0 * (aw @ bw.T)
    )
    return np.maximum(sq, 0.0)


def matern52(rsq: np.ndarray, signal_variance: float) -> np.ndarray:
    r = np.sqrt(rsq)
    return signal_variance * (1.0 + SQRT5 * r + (5.0 / 3.0) * rsq) * np.exp(-SQRT5 * r)


def matern52_h(rsq: np.ndarray, signal_variance: float) -> np.ndarray:
    """Radial factor h(r) with dk/dx_i = -h(r) * rho_i * (x_i - y_i); smooth at 0."""
    r = np.sqrt(rsq)
    return signal_variance * (5.0 / 3.0) * (1.0 + SQRT5 * r) * np.exp(-SQRT5 * r)


def chol_with_jitter(mat: np.ndarray, max_jitter: float = MAX_JITTER):
    """Lower Cholesky factor, escalating diagonal jitter up to max_jitter."""
    try:
        return cholesky(mat, lower=True, check_finite=False), 0.0
    except np.linalg.LinAlgError:
        pass
    jitter = 1e-10
    eye = np.eye(mat.shape[0])
    while jitter <= max_jitter:
        try:
            return cholesky(mat + jitter * eye, lower=True, check_finite=False), jitter
        except np.linalg.LinAlgError:
            jitter *= 10.0
    raise KernelFactorizationError(
        f"kernel not positive definite at jitter {max_jitter:g}"
    )


# ---------------------------------------------------------------------------
# Latent utilities from pairwise probit comparisons


@dataclass(frozen=True)
class LatentUtilities:
    """Per-sample scalar utilities inferred from comparisons."""

    values: np.ndarray  # standardized: mean 0, population std 1 (or all zero)
    standardized: bool
    raw_values: np.ndarray
    grad_norm: float

    def __post_init__(self):
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.float64))
        object.__setattr__(
            self, "raw_values", np.asarray(self.raw_values, dtype=np.float64)
        )


def reference_kernel(x: np.ndarray) -> np.ndarray:
    """Fixed MAP-step prior kernel: unit-variance Matern-5/2, isotropic
    lengthscale sqrt(n)/2. Only ordering information is extracted from the
    MAP, so any fixed smooth kernel works; n is the column count of x.

    The 1e-4 nugget keeps the Newton system well conditioned when the
    session acquires exact-duplicate points (0/1 rounding makes that
    common), which would otherwise stall convergence below the 1e-6
    gradient tolerance."""
    n = x.shape[1]
    inv_sq = np.full(n, 4.0 / n)
    return matern52(pairwise_sq_dist(x, x, inv_sq), 1.0) + 1e-4 * np.eye(x.shape[0])


def standardize(u: np.ndarray) -> np.ndarray:
    std = u.std()
    if std == 0.0 or not np.isfinite(std):
        return np.zeros_like(u)
    return (u - u.mean()) / std


def infer_latent_utilities(
    x: np.ndarray,
    pairs: list[tuple[int, int]],
    sigma_pref: float = 1.0,
    max_iter: int = 100,
    grad_tol: float = 1e-6,
) -> LatentUtilities:
    """MAP of sum log Phi((u_i - u_j)/sigma) - 0.5 u' K0^-1 u by Newton with
    backtracking; utilities are relearned from scratch on every call.

    `pairs` holds (preferred_row, other_row) indices into x. Disconnected
    comparison components are fine: the prior anchors them near zero.
    """
    x = np.asarray(x, dtype=np.float64)
    m = x.shape[0]
    for i, j in pairs:
        if not (0 <= i < m and 0 <= j < m):
            raise ValueError(f"pair ({i}, {j}) references a missing row")
        if i == j:
            raise ValueError("self-comparison in preference pairs")

    k0 = reference_kernel(x)
    k0_inv = cho_solve(cho_factor(k0, lower=True), np.eye(m))
    u = np.zeros(m)

    if not pairs:
        return LatentUtilities(np.zeros(m), True, u, 0.0)

    pi = np.array([p[0] for p in pairs])
    pj = np.array([p[1] for p in pairs])
    inv_sigma = 1.0 / sigma_pref

    def objective(u_vec):
        d = (u_vec[pi] - u_vec[pj]) * inv_sigma
        return log_ndtr(d).sum() - 0.5 * u_vec @ (k0_inv @ u_vec)

    def grad_hess(u_vec):
        d = (u_vec[pi] - u_vec[pj]) * inv_sigma
        # psi = phi(d)/Phi(d), computed in log space for stability
        log_phi = -0.5 * d * d - 0.5 * LOG2PI
        psi = np.exp(log_phi - log_ndtr(d))
        w = psi * (d + psi)  # curvature weight per pair, always > 0
        g = -k0_inv @ u_vec
        np.add.at(g, pi, psi * inv_sigma)
        np.add.at(g, pj, -psi * inv_sigma)
        h = k0_inv.copy()
        wss = w * inv_sigma * inv_sigma
        np.add.at(h, (pi, pi), wss)
        np.add.at(h, (pj, pj), wss)
        np.add.at(h, (pi, pj), -wss)
        np.add.at(h, (pj, pi), -wss)
        return g, h  # gradient of objective, NEGATIVE Hessian (PD)

    grad_norm = np.inf
    for _ in range(max_iter):
        g, h = grad_hess(u)
        grad_norm = float(np.linalg.norm(g))
        if grad_norm <= grad_tol:
            break
        step = cho_solve(cho_factor(h, lower=True), g)
        f0 = objective(u)
        t = 1.0
        while t > 1e-12:
            u_new = u + t * step
            if objective(u_new) > f0 - 1e-12:
                break
            t *= 0.5
        u = u + t * step
    else:
        g, _ = grad_hess(u)
        grad_norm = float(np.linalg.norm(g))
        if grad_norm > grad_tol:
            raise MapInferenceError(
                f"no convergence after {max_iter} Newton steps "
                f"(gradient norm {grad_norm:.3e})",
                u,
            )

    return LatentUtilities(standardize(u), True, u, grad_norm)


# ---------------------------------------------------------------------------
# Hyperparameter posterior under the sparse axis-aligned shrinkage prior


@dataclass(frozen=True)
class HyperDraw:
    """One posterior draw of the GP kernel hyperparameters."""

    inv_sq_lengthscales: np.ndarray
    signal_variance: float
    global_shrinkage: float
    observation_noise: float

    def __post_init__(self):
        rho = np.asarray(self.inv_sq_lengthscales, dtype=np.float64)
        object.__setattr__(self, "inv_sq_lengthscales", rho)
        vals = [self.signal_variance, self.global_shrinkage, self.observation_noise]
        if (rho <= 0).any() or any(v <= 0 for v in vals):
            raise ValueError("hyperparameters must be strictly positive")
        if not np.isfinite(rho).all() or not all(np.isfinite(v) for v in vals):
            raise ValueError("hyperparameters must be finite")


def _log_half_cauchy(value: float | np.ndarray, scale) -> float | np.ndarray:
    return (
        math.log(2.0 / math.pi)
        - np.log(scale)
        - np.log1p((value / scale) ** 2)
    )


class _SaasModel:
    """Log joint density with an incrementally updatable weighted-distance
    cache: changing one inv-sq-lengthscale costs a single axpy over the
    (M, M) distance slab rather than a full rebuild."""

    def __init__(self, x: np.ndarray, u: np.ndarray):
        self.m, self.d = x.shape
        self.u = u
        diff = x[:, None, :] - x[None, :, :]
        self.d2 = np.ascontiguousarray(
            (diff * diff).transpose(2, 0, 1).reshape(self.d, -1)
        )
        self.n_loglik_evals = 0

    def rsq_for(self, rho: np.ndarray) -> np.ndarray:
        return rho @ self.d2

    def loglik(self, rsq: np.ndarray, signal: float, noise: float) -> float:
        self.n_loglik_evals += 1
        if not (np.isfinite(signal) and np.isfinite(noise)):
            return -np.inf
        k = matern52(np.maximum(rsq, 0.0), signal).reshape(self.m, self.m)
        k[np.diag_indices_from(k)] += noise
        try:
            low = cholesky(k, lower=True, check_finite=False)
        except np.linalg.LinAlgError:
            return -np.inf
        w = solve_triangular(low, self.u, lower=True, check_finite=False)
        return float(
            -0.5 * (w @ w) - np.log(np.diag(low)).sum() - 0.5 * self.m * LOG2PI
        )


def _log_prior(log_rho, log_tau, log_signal, log_noise):
    tau = math.exp(log_tau)
    lp = float(_log_half_cauchy(tau, GLOBAL_SHRINKAGE_SCALE)) + log_tau
    lp += float((_log_half_cauchy(np.exp(log_rho), tau) + log_rho).sum())
    lp += -0.5 * ((log_signal - LOG_SIGNAL_MEAN) / LOG_SIGNAL_STD) ** 2
    lp += -0.5 * ((log_noise - LOG_NOISE_MEAN) / LOG_NOISE_STD) ** 2
    return lp


def _slice_update(logp, x0, lp0, width, rng, max_steps=16):
    """One stepping-out/shrinkage slice-sampling update (Neal 2003).

    Returns (x1, lp1, interval_width) where interval_width feeds the
    warmup width adaptation.
    """
    level = lp0 + math.log(rng.uniform(1e-300, 1.0))
    lo = x0 - width * rng.uniform()
    hi = lo + width
    f_lo = logp(lo)
    f_hi = logp(hi)
    for _ in range(max_steps):
        if f_lo <= level:
            break
        lo -= width
        f_lo = logp(lo)
    for _ in range(max_steps):
        if f_hi <= level:
            break
        hi += width
        f_hi = logp(hi)
    while True:
        x1 = rng.uniform(lo, hi)
        lp1 = logp(x1)
        if lp1 > level:
            return x1, lp1, hi - lo
        if x1 < x0:
            lo = x1
        else:
            hi = x1
        if hi - lo < 1e-12:
            return x0, lp0, hi - lo


def sample_hyperposterior(
    x: np.ndarray,
    utilities: LatentUtilities,
    rng: np.random.Generator,
    warmup: int = 80,
    n_samples: int = 80,
    thin: int = 5,
) -> list[HyperDraw]:
    """Single-chain posterior draws of the kernel hyperparameters.

    Runs `warmup` adaptation sweeps and `n_samples` sampling sweeps of
    coordinate-wise slice sampling on log-parameters, retaining every
    `thin`-th sweep (16 draws with the defaults). Initialization is at the
    prior medians; per-coordinate step widths adapt during warmup only.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[0] < 2:
        raise ValueError("need at least 2 training points")
    u = utilities.values if utilities.standardized else standardize(utilities.values)
    model = _SaasModel(x, u)
    d = model.d

    log_tau = math.log(GLOBAL_SHRINKAGE_SCALE)  # prior median
    log_rho = np.full(d, log_tau)  # median of half-Cauchy(tau) is tau
    log_signal = LOG_SIGNAL_MEAN
    log_noise = LOG_NOISE_MEAN
    widths = np.full(d + 3, 2.0)

    rsq = model.rsq_for(np.exp(log_rho))
    cur = model.loglik(rsq, math.exp(log_signal), math.exp(log_noise)) + _log_prior(
        log_rho, log_tau, log_signal, log_noise
    )
    if not np.isfinite(cur):
        raise KernelFactorizationError("initial hyperparameter state is infeasible")

    draws: list[HyperDraw] = []
    with np.errstate(over="ignore", invalid="ignore"):
        for sweep in range(warmup + n_samples):
            rsq = model.rsq_for(np.exp(log_rho))  # refresh, avoids axpy drift
            for i in range(d):
                rho_i = math.exp(log_rho[i])
                base = rsq - rho_i * model.d2[i]

                def lp_rho(lr, i=i, base=base):
                    log_rho[i] = lr
                    ll = model.loglik(
                        base + math.exp(lr) * model.d2[i],
                        math.exp(log_signal),
                        math.exp(log_noise),
                    )
                    return ll + _log_prior(log_rho, log_tau, log_signal, log_noise)

                new, cur, span = _slice_update(lp_rho, log_rho[i], cur, widths[i], rng)
                log_rho[i] = new
                rsq = base + math.exp(new) * model.d2[i]
                if sweep < warmup:
                    widths[i] = 0.9 * widths[i] + 0.1 * max(span * 0.6, 0.1)

            def lp_signal(ls):
                return model.loglik(rsq, math.exp(ls), math.exp(log_noise)) + _log_prior(
                    log_rho, log_tau, ls, log_noise
                )

            log_signal, cur, span = _slice_update(
                lp_signal, log_signal, cur, widths[d], rng
            )
            if sweep < warmup:
                widths[d] = 0.9 * widths[d] + 0.1 * max(span * 0.6, 0.1)

            def lp_noise(ln):
                return model.loglik(rsq, math.exp(log_signal), math.exp(ln)) + _log_prior(
                    log_rho, log_tau, log_signal, ln
                )

            log_noise, cur, span = _slice_update(
                lp_noise, log_noise, cur, widths[d + 1], rng
            )
            if sweep < warmup:
                widths[d + 1] = 0.9 * widths[d + 1] + 0.1 * max(span * 0.6, 0.1)

            # Global shrinkage enters the prior only; its conditional needs
            # no kernel work.
            ll_cached = cur - _log_prior(log_rho, log_tau, log_signal, log_noise)

            def lp_tau(lt):
                return ll_cached + _log_prior(log_rho, lt, log_signal, log_noise)

            log_tau, cur, span = _slice_update(lp_tau, log_tau, cur, widths[d + 2], rng)
            if sweep < warmup:
                widths[d + 2] = 0.9 * widths[d + 2] + 0.1 * max(span * 0.6, 0.1)

            if sweep >= warmup and (sweep - warmup) % thin == thin - 1:
                draws.append(
                    HyperDraw(
                        inv_sq_lengthscales=np.exp(log_rho.copy()),
                        signal_variance=math.exp(log_signal),
                        global_shrinkage=math.exp(log_tau),
                        observation_noise=math.exp(log_noise),
                    )
                )
    return draws


def relevance_ranking(draws: list[HyperDraw]) -> list[tuple[int, float]]:
    """Per-dimension relevance: median inv-sq-lengthscale over draws,
    sorted descending as (dimension, score)."""
    if not draws:
        raise ValueError("need at least one draw")
    med = np.median(np.stack([d.inv_sq_lengthscales for d in draws]), axis=0)
    order = np.argsort(-med, kind="stable")
    return [(int(i), float(med[i])) for i in order]


# ---------------------------------------------------------------------------
# Mixture predictive posterior


@dataclass
class _FittedDraw:
    hyper: HyperDraw
    chol: np.ndarray  # lower factor of K(X,X) + noise I
    weights: np.ndarray  # (K + noise I)^-1 u


@dataclass(frozen=True)
class Prediction:
    """Per-draw conditionals plus uniform-mixture moments."""

    means: np.ndarray  # (H, Q)
    variances: np.ndarray  # (H, Q)
    mixture_mean: np.ndarray  # (Q,)
    mixture_variance: np.ndarray  # (Q,)
    covariances: np.ndarray | None = None  # (H, Q, Q) when requested


class PosteriorMixture:
    """GP predictive posterior as a uniform mixture over hyperparameter draws."""

    def __init__(self, x: np.ndarray, utilities: LatentUtilities, draws: list[HyperDraw]):
        if not draws:
            raise ValueError("mixture needs at least one draw")
        self.x = np.asarray(x, dtype=np.float64)
        self.u = (
            utilities.values
            if utilities.standardized
            else standardize(utilities.values)
        )
        self.dim = self.x.shape[1]
        self.fitted: list[_FittedDraw] = []
        for hyper in draws:
            rsq = pairwise_sq_dist(self.x, self.x, hyper.inv_sq_lengthscales)
            k = matern52(rsq, hyper.signal_variance)
            k[np.diag_indices_from(k)] += hyper.observation_noise
            low, _ = chol_with_jitter(k)
            w = solve_triangular(low, self.u, lower=True, check_finite=False)
            weights = solve_triangular(
                low.T, w, lower=False, check_finite=False
            )
            self.fitted.append(_FittedDraw(hyper, low, weights))

    @property
    def n_draws(self) -> int:
        return len(self.fitted)

    @property
    def draws(self) -> list[HyperDraw]:
        return [f.hyper for f in self.fitted]

    def predict(self, queries: np.ndarray, full_cov: bool = False) -> Prediction:
        q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        if q.shape[1] != self.dim:
            raise ValueError(
                f"query dimension {q.shape[1]} != training dimension {self.dim}"
            )
        means, variances, covs = [], [], []
        for f in self.fitted:
            hyper = f.hyper
            kxq = matern52(
                pairwise_sq_dist(self.x, q, hyper.inv_sq_lengthscales),
                hyper.signal_variance,
            )
            mean = kxq.T @ f.weights
            v = solve_triangular(f.chol, kxq, lower=True, check_finite=False)
            if full_cov:
                kqq = matern52(
                    pairwise_sq_dist(q, q, hyper.inv_sq_lengthscales),
                    hyper.signal_variance,
                )
                cov = kqq - v.T @ v
                covs.append(cov)
                var = np.diag(cov).copy()
            else:
                var = hyper.signal_variance - (v * v).sum(axis=0)
            means.append(mean)
            variances.append(np.maximum(var, 0.0))
        means = np.stack(means)
        variances = np.stack(variances)
        mixture_mean = means.mean(axis=0)
        mixture_var = (variances + means * means).mean(axis=0) - mixture_mean**2
        return Prediction(
            means=means,
            variances=variances,
            mixture_mean=mixture_mean,
            mixture_variance=np.maximum(mixture_var, 0.0),
            covariances=np.stack(covs) if full_cov else None,
        )
