"""Nested Laplace approximation of a cluster's log marginal likelihood.

For fixed hyperparameters the latent field is integrated out with a Gaussian
approximation at the posterior mode; the result is then integrated over the
hyperparameters on a small grid centred at their posterior mode.

The per-observation effect ``eps`` has a diagonal posterior precision block,
so Newton steps eliminate it and only factorise the Schur complement on the
shared block (dimension ``1 + p + sum of temporal block sizes``). The Schur
complement is also the posterior precision of the shared block, which is what
curve sampling needs.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.optimize import minimize
from scipy.special import gammaln, logsumexp

from .errors import ModelError, NegativeCount, NoConvergence, OptimFailed, SingularHessian
from .lgm import (
    LOG_2PI,
    ClusterData,
    HyperParams,
    LatentLayout,
    ModelSpec,
    layout_for,
    log_hyper_prior,
)

log = logging.getLogger(__name__)

LOGSUMEXP_FLOOR = 700.0


@dataclass(frozen=True)
class LaplaceConfig:
    tol: float = 1e-8
    max_iters: int = 50
    max_halving: int = 20
    decrement_tol: float = 1e-12
    stall_decrement_tol: float = 1e-6
    fd_step: float = 1e-4
    hessian_step: float = 1e-2
    # points per dimension for d = 1 and d = 2; None uses 9 and 5
    grid_points_per_dim: int | None = None
    # eigenvalue floor for the non-PD fallback
    fallback_eig_floor: float = 1e-4


DEFAULT_CONFIG = LaplaceConfig()


class _Prepared:
    """Cluster data in the form the Newton loop needs."""

    def __init__(self, data: ClusterData, spec: ModelSpec):
        if data.T != spec.T:
            raise ModelError(f"data has T={data.T} but the model expects T={spec.T}")
        self.data = data
        self.spec = spec
        self.layout: LatentLayout = layout_for(spec)
        self.y = data.y
        self.offset = data.offset
        self.n, self.T = data.y.shape
        self.poisson = spec.family == "poisson"
        if self.poisson:
            if np.any(self.y < 0):
                raise NegativeCount("poisson observations must be non-negative")
            self.E = np.exp(self.offset)
            self.const = -float(np.sum(gammaln(self.y + 1.0)))
            # magnitude of the summed log-likelihood terms, which sets the rounding floor
            self.scale = float(np.sum(np.abs(self.y * self.offset)) + 2.0 * np.sum(self.y)) - self.const
        else:
            self.resid0 = self.y - self.offset
            self.scale = 0.0

    def loglik(self, eta: np.ndarray, obs_prec: float | None):
        if self.poisson:
            mu = self.E * np.exp(eta)
            ll = float(np.sum(self.y * (self.offset + eta) - mu)) + self.const
            return ll, self.y - mu, mu
        r = self.resid0 - eta
        ll = self.y.size * 0.5 * (math.log(obs_prec) - LOG_2PI) - 0.5 * obs_prec * float(np.sum(r * r))
        return ll, obs_prec * r, None

    def initial_latent(self) -> np.ndarray:
        lay = self.layout
        x = np.zeros(lay.dim_h + (self.n * self.T if self.spec.has_error_term else 0))
        for b in lay.blocks:
            if b.component.kind == "intercept":
                if self.poisson:
                    x[b.sl] = math.log((self.y.sum() + 0.5) / self.E.sum())
                else:
                    x[b.sl] = float(self.resid0.mean())
        return x


@dataclass
class ModeResult:
    x_mode: np.ndarray
    log_det_H: float
    newton_iters: int
    converged: bool
    objective: float
    loglik: float
    quad: float
    grad_max: float
    # shared-block posterior precision (Schur complement) and its Cholesky factor
    schur: np.ndarray
    schur_chol: np.ndarray
    # diagonal of the eps block of H (tau + w), None without an eps term
    eps_diag: np.ndarray | None
    weights: np.ndarray | None
    Q_shared: np.ndarray
    basis: np.ndarray
    eps_prec: float | None
    history: list = field(default_factory=list)

    @property
    def dim_h(self) -> int:
        return self.schur.shape[0]

    @property
    def h_mode(self) -> np.ndarray:
        return self.x_mode[: self.dim_h]

    @cached_property
    def H(self) -> sp.csr_matrix:
        """Negative Hessian of log p(x | theta, y) at the mode, as a sparse matrix."""
        if self.eps_diag is None:
            return sp.csr_matrix(self.schur)
        n, T = self.eps_diag.shape
        B = np.tile(self.basis, (n, 1))
        w = self.weights.ravel()
        top_left = self.Q_shared + B.T @ (w[:, None] * B)
        cross = sp.csr_matrix(B.T * w[None, :])
        diag = sp.diags(self.eps_diag.ravel())
        return sp.bmat([[sp.csr_matrix(top_left), cross], [cross.T, diag]], format="csr")


def _shared_curve(basis: np.ndarray, h: np.ndarray) -> np.ndarray:
    return basis @ h


def _cholesky(S: np.ndarray) -> np.ndarray:
    try:
        return sla.cholesky(S, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise SingularHessian("posterior precision of the shared block is not positive definite") from exc


def _mode(prep: _Prepared, theta: HyperParams, x0: np.ndarray | None, cfg: LaplaceConfig) -> ModeResult:
    lay = prep.layout
    Bt = lay.basis
    dh = lay.dim_h
    n, T = prep.n, prep.T
    Qh, _, _ = lay.shared_precision(theta)
    tau = lay.eps_precision(theta)
    obs = lay.obs_precision(theta)
    has_eps = tau is not None

    x = prep.initial_latent() if x0 is None else np.array(x0, dtype=float)

    def unpack(x):
        h = x[:dh]
        eps = x[dh:].reshape(n, T) if has_eps else None
        eta = np.broadcast_to(Bt @ h, (n, T))
        if has_eps:
            eta = eta + eps
        return h, eps, eta

    def evaluate(x):
        h, eps, eta = unpack(x)
        ll, d1, d2 = prep.loglik(eta, obs)
        quad = float(h @ Qh @ h)
        if has_eps:
            quad += tau * float(np.sum(eps * eps))
        return ll - 0.5 * quad, ll, quad, d1, d2, h, eps

    phi, ll, quad, d1, d2, h, eps = evaluate(x)
    history = [phi]
    converged = False
    it = 0
    grad_max = math.inf
    for it in range(cfg.max_iters + 1):
        g_h = Bt.T @ d1.sum(axis=0) - Qh @ h
        if has_eps:
            w = d2
            g_e = d1 - tau * eps
            grad_max = max(float(np.max(np.abs(g_h))) if dh else 0.0, float(np.max(np.abs(g_e))))
        else:
            grad_max = float(np.max(np.abs(g_h))) if dh else 0.0
        if grad_max <= cfg.tol * (1.0 + float(np.max(np.abs(x)))):
            converged = True
            break
        if it == cfg.max_iters:
            break
        # Newton direction through the Schur complement on the shared block
        if has_eps:
            denom = tau + w
            s = (w * tau / denom).sum(axis=0)
            S = Qh + Bt.T @ (s[:, None] * Bt)
            rhs = g_h - Bt.T @ ((w / denom) * g_e).sum(axis=0)
            L = _cholesky(S)
            dh_step = sla.cho_solve((L, True), rhs, check_finite=False)
            de_step = (g_e - w * (Bt @ dh_step)[None, :]) / denom
            step = np.concatenate([dh_step, de_step.ravel()])
            g = np.concatenate([g_h, g_e.ravel()])
        else:
            wsum = obs * n if d2 is None else d2.sum(axis=0)
            S = Qh + Bt.T @ (np.broadcast_to(wsum, (T,))[:, None] * Bt)
            L = _cholesky(S)
            step = sla.cho_solve((L, True), g_h, check_finite=False)
            g = g_h
        decrement = float(g @ step)
        # the Newton decrement bounds the remaining gain in log density, which
        # stays meaningful when large counts put the gradient test below rounding
        if decrement <= max(cfg.decrement_tol, 1e-14 * (1.0 + abs(phi) + prep.scale)):
            converged = True
            break
        t = 1.0
        accepted = False
        for _ in range(cfg.max_halving + 1):
            x_new = x + t * step
            res = evaluate(x_new)
            if np.isfinite(res[0]) and res[0] >= phi - 1e-14 * (1.0 + abs(phi) + prep.scale):
                accepted = True
                break
            t *= 0.5
        if not accepted:
            # no ascent left at floating point resolution
            converged = decrement <= cfg.stall_decrement_tol
            break
        x = x_new
        phi, ll, quad, d1, d2, h, eps = res
        history.append(phi)

    # Hessian pieces at the final point
    if has_eps:
        w = d2
        denom = tau + w
        s = (w * tau / denom).sum(axis=0)
        S = Qh + Bt.T @ (s[:, None] * Bt)
        L = _cholesky(S)
        log_det_H = float(np.sum(np.log(denom))) + 2.0 * float(np.sum(np.log(np.diag(L))))
        eps_diag, weights = denom, w
    else:
        wsum = obs * n if d2 is None else d2.sum(axis=0)
        S = Qh + Bt.T @ (np.broadcast_to(wsum, (T,))[:, None] * Bt)
        L = _cholesky(S)
        log_det_H = 2.0 * float(np.sum(np.log(np.diag(L))))
        eps_diag = weights = None

    return ModeResult(
        x_mode=x, log_det_H=log_det_H, newton_iters=it, converged=converged,
        objective=phi, loglik=ll, quad=quad, grad_max=grad_max,
        schur=S, schur_chol=L, eps_diag=eps_diag, weights=weights,
        Q_shared=Qh, basis=Bt, eps_prec=tau, history=history,
    )


def find_mode(data: ClusterData, spec: ModelSpec, theta: HyperParams,
              x0: np.ndarray | None = None, config: LaplaceConfig = DEFAULT_CONFIG) -> ModeResult:
    """Posterior mode of the latent field by damped Newton-Raphson.

    Raises
    ------
    NoConvergence
        If the gradient criterion is not met within ``config.max_iters``;
        the exception carries the final :class:`ModeResult` in its diagnostics.
    """
    prep = _Prepared(data, spec)
    res = _mode(prep, theta, x0, config)
    if not res.converged:
        raise NoConvergence(
            f"Newton iterations did not converge (grad max {res.grad_max:.3g}, {res.newton_iters} iters)",
            {"mode": res},
        )
    return res


def _log_conditional(prep: _Prepared, theta: HyperParams, x0, cfg: LaplaceConfig,
                     include_normalizer: bool = True) -> tuple[float, ModeResult]:
    lay = prep.layout
    res = _mode(prep, theta, x0, cfg)
    if not res.converged:
        raise NoConvergence(
            f"Newton iterations did not converge (grad max {res.grad_max:.3g})", {"mode": res}
        )
    _, rank, log_gdet = lay.shared_precision(theta)
    dim = res.x_mode.size
    if res.eps_prec is not None:
        n_eps = prep.n * prep.T
        rank += n_eps
        log_gdet += n_eps * math.log(res.eps_prec)
    value = res.loglik - 0.5 * res.quad - 0.5 * res.log_det_H + 0.5 * dim * LOG_2PI
    if include_normalizer:
        value += 0.5 * log_gdet - 0.5 * rank * LOG_2PI
    return value, res


def log_conditional_marginal(data: ClusterData, spec: ModelSpec, theta: HyperParams,
                             config: LaplaceConfig = DEFAULT_CONFIG,
                             include_normalizer: bool = True) -> float:
    """Laplace approximation of ``log p(y | theta)`` (no hyperprior).

    ``include_normalizer=False`` drops ``0.5 log|Q|* - (r/2) log 2 pi``; it
    exists only to demonstrate that the term matters.
    """
    value, _ = _log_conditional(_Prepared(data, spec), theta, None, config, include_normalizer)
    return value


def log_marginal_given_theta(data: ClusterData, spec: ModelSpec, theta: HyperParams,
                             config: LaplaceConfig = DEFAULT_CONFIG) -> float:
    """``log p(y | x*, theta) + log p(x* | theta) + log p(theta) - log p_G(x* | theta, y)``."""
    return log_conditional_marginal(data, spec, theta, config) + log_hyper_prior(theta, spec)


# ---------------------------------------------------------------------------
# integration over the hyperparameters
# ---------------------------------------------------------------------------

@dataclass
class MarginalResult:
    log_marginal: float
    theta_mode: HyperParams
    grid_points: list[tuple[HyperParams, float]]
    inner_results: list[ModeResult]
    fallback: bool = False
    n_evals: int = 0
    hessian: np.ndarray | None = None
    message: str = ""

    @property
    def newton_iters(self) -> int:
        return sum(r.newton_iters for r in self.inner_results)

    def summary(self) -> dict:
        return {
            "log_marginal": self.log_marginal,
            "theta_mode": dict(self.theta_mode.values),
            "newton_iters": self.newton_iters,
            "fallback": self.fallback,
            "n_evals": self.n_evals,
        }


def _robust_var(r: np.ndarray) -> float:
    if r.shape[0] > 1:
        v = float(np.mean((r - r.mean(axis=0)) ** 2)) * r.shape[0] / (r.shape[0] - 1)
    else:
        v = 0.0
    if v <= 0.0 and r.shape[1] > 2:
        v = float(np.var(np.diff(r, axis=1))) / 2.0
    return v


def initial_theta(data: ClusterData, spec: ModelSpec) -> HyperParams:
    """Data-driven starting point for the hyperparameter optimisation."""
    if spec.family == "poisson":
        z = np.log((data.y + 0.5) / np.exp(data.offset))
        noise = float(np.mean(1.0 / (data.y + 0.5)))
    else:
        z = data.y - data.offset
        noise = 0.0
    zbar = z.mean(axis=0)
    values = {}
    for name in spec.hyper_names:
        if name == "log_prec_obs":
            values[name] = -math.log(max(_robust_var(z), 1e-10))
        elif name == "log_prec_eps":
            values[name] = -math.log(max(_robust_var(z) - noise, 1e-4))
        elif name.startswith("rho"):
            values[name] = 0.0
        elif "rw1" in name or "seasonal" in name:
            values[name] = -math.log(max(float(np.var(np.diff(zbar))), 1e-4))
        else:
            values[name] = -math.log(max(float(np.var(zbar)), 1e-4))
    return HyperParams(values)


def _grid_1d(k: int) -> np.ndarray:
    return np.linspace(-2.0, 2.0, k)


def _ccd_design(d: int) -> tuple[np.ndarray, np.ndarray]:
    """Centre, 2d axial (radius 2) and 2^d factorial (+-sqrt 2) points.

    Weights make the rule exact for Gaussian moments up to order five, so
    sum_j w_j r(z_j) approximates E[r(Z)] for Z standard normal.
    """
    pts = [np.zeros(d)]
    wts = [0.75 - d / 8.0]
    for k in range(d):
        for s in (-2.0, 2.0):
            p = np.zeros(d)
            p[k] = s
            pts.append(p)
            wts.append(1.0 / 16.0)
    b = math.sqrt(2.0)
    for signs in np.ndindex(*([2] * d)):
        pts.append(np.where(np.array(signs) == 0, -b, b))
        wts.append(1.0 / (4.0 * 2 ** d))
    return np.array(pts), np.array(wts)


def _capped_logsumexp(values: np.ndarray) -> float:
    values = np.asarray(values, dtype=float)
    top = np.max(values)
    keep = values >= top - LOGSUMEXP_FLOOR
    return float(logsumexp(values[keep]))


def integrate_hyperparameters(data: ClusterData, spec: ModelSpec,
                              config: LaplaceConfig = DEFAULT_CONFIG,
                              theta0: HyperParams | None = None) -> MarginalResult:
    """Log marginal likelihood ``log p(y_c)`` with the hyperparameters integrated out.

    The integrand ``log p(y | theta) + log p(theta)`` is maximised by BFGS with
    central finite-difference gradients; its Hessian at the mode defines a
    standardised grid. With ``d`` hyperparameters the grid is 9 points on
    ``mode +- {0, .5, 1, 1.5, 2} sd`` (d = 1), a 5 x 5 product grid
    (d = 2) or a 15-point central composite design (d = 3).
    """
    prep = _Prepared(data, spec)
    names = spec.hyper_names
    d = len(names)
    if d > 3:
        raise ModelError(f"at most 3 hyperparameters are supported, model has {d}")

    if d == 0:
        theta = HyperParams({})
        value, res = _log_conditional(prep, theta, None, config)
        return MarginalResult(value, theta, [(theta, value)], [res], n_evals=1)

    state = {"x": None, "evals": 0}

    def log_post(z: np.ndarray) -> tuple[float, ModeResult]:
        theta = HyperParams.from_array(names, z)
        value, res = _log_conditional(prep, theta, state["x"], config)
        state["x"] = res.x_mode
        state["evals"] += 1
        return value + log_hyper_prior(theta, spec), res

    def neg(z):
        return -log_post(z)[0]

    h = config.fd_step

    def neg_grad(z):
        g = np.empty(d)
        for k in range(d):
            e = np.zeros(d)
            e[k] = h
            g[k] = (neg(z + e) - neg(z - e)) / (2.0 * h)
        return g

    start = (theta0 if theta0 is not None else initial_theta(data, spec)).to_array(names)
    opt = minimize(neg, start, jac=neg_grad, method="BFGS", options={"gtol": 1e-4, "maxiter": 200})
    z_mode = np.asarray(opt.x, dtype=float)
    if not np.all(np.isfinite(z_mode)) or not np.isfinite(opt.fun):
        raise OptimFailed(f"hyperparameter optimisation failed: {opt.message}")

    f0, res0 = log_post(z_mode)
    x_mode = res0.x_mode

    # numerical Hessian of the negative log posterior
    hs = config.hessian_step
    Hm = np.empty((d, d))
    fpm = {}

    def f_at(offsets):
        key = tuple(offsets)
        if key not in fpm:
            state["x"] = x_mode
            fpm[key] = -log_post(z_mode + hs * np.array(offsets, dtype=float))[0]
        return fpm[key]

    for i in range(d):
        ei = [0] * d
        ei[i] = 1
        em = [0] * d
        em[i] = -1
        Hm[i, i] = (f_at(ei) - 2.0 * (-f0) + f_at(em)) / hs ** 2
        for j in range(i + 1, d):
            pp = [0] * d; pp[i] = 1; pp[j] = 1
            pmm = [0] * d; pmm[i] = 1; pmm[j] = -1
            mp = [0] * d; mp[i] = -1; mp[j] = 1
            mm = [0] * d; mm[i] = -1; mm[j] = -1
            Hm[i, j] = Hm[j, i] = (f_at(pp) - f_at(pmm) - f_at(mp) + f_at(mm)) / (4.0 * hs ** 2)

    theta_mode = HyperParams.from_array(names, z_mode)
    eig, vecs = np.linalg.eigh(Hm)
    if not np.all(eig > 0):
        floor = config.fallback_eig_floor
        log_det = float(np.sum(np.log(np.maximum(np.abs(eig), floor))))
        value = f0 + 0.5 * d * LOG_2PI - 0.5 * log_det
        log.warning("hyperparameter Hessian is not positive definite (eigenvalues %s); "
                    "using the plug-in Laplace fallback", eig)
        return MarginalResult(value, theta_mode, [(theta_mode, f0)], [res0], fallback=True,
                              n_evals=state["evals"], hessian=Hm, message=str(opt.message))

    sd = 1.0 / np.sqrt(eig)
    scale = vecs * sd[None, :]  # theta = mode + scale @ z
    log_scale_det = float(np.sum(np.log(sd)))

    if d <= 2:
        k = config.grid_points_per_dim or (9 if d == 1 else 5)
        axis = _grid_1d(k)
        spacing = axis[1] - axis[0]
        zs = np.array(np.meshgrid(*([axis] * d), indexing="ij")).reshape(d, -1).T
        log_cell = d * math.log(spacing) + log_scale_det
        # rescale so the truncated grid integrates a Gaussian integrand exactly
        log_gauss_mass = float(logsumexp(-0.5 * np.sum(zs * zs, axis=1) - 0.5 * d * LOG_2PI)) + d * math.log(spacing)
        log_w_extra = np.full(len(zs), log_cell - log_gauss_mass)
    else:
        zs, w = _ccd_design(d)
        log_w_extra = (np.log(w) + 0.5 * np.sum(zs * zs, axis=1)
                       + 0.5 * d * LOG_2PI + log_scale_det)

    grid: list[tuple[HyperParams, float]] = []
    inner: list[ModeResult] = []
    terms = np.empty(len(zs))
    for j, zj in enumerate(zs):
        if not np.any(zj):
            fj, rj = f0, res0
        else:
            state["x"] = x_mode
            fj, rj = log_post(z_mode + scale @ zj)
        terms[j] = fj + log_w_extra[j]
        grid.append((HyperParams.from_array(names, z_mode + scale @ zj), float(terms[j])))
        inner.append(rj)
    value = _capped_logsumexp(terms)
    return MarginalResult(value, theta_mode, grid, inner, n_evals=state["evals"],
                          hessian=Hm, message=str(opt.message))


# ---------------------------------------------------------------------------
# composition sampling of the within-cluster latent curve
# ---------------------------------------------------------------------------

@dataclass
class LatentSummary:
    time: np.ndarray
    h_mean: np.ndarray
    h_q05: np.ndarray
    h_q95: np.ndarray
    rr_mean: np.ndarray
    rr_q05: np.ndarray
    rr_q95: np.ndarray
    samples: np.ndarray | None = None


def conditional_posterior(data: ClusterData, spec: ModelSpec, result: MarginalResult,
                          n_samples: int, rng: np.random.Generator,
                          keep_samples: bool = False) -> LatentSummary:
    """Sample the shared latent curve ``h(t)`` from the mixture of Gaussian approximations.

    Grid points are drawn with probability proportional to their integration
    weight and ``h`` from the Gaussian approximation at that point (whose
    precision on the shared block is the Schur complement).
    """
    logw = np.array([lw for _, lw in result.grid_points])
    p = np.exp(logw - logw.max())
    p /= p.sum()
    counts = rng.multinomial(n_samples, p)
    curves = []
    for j, cnt in enumerate(counts):
        if cnt == 0:
            continue
        r = result.inner_results[j]
        z = rng.standard_normal((r.dim_h, cnt))
        # S = L L^T, so h = mode + L^{-T} z has covariance S^{-1}
        hs = r.h_mode[:, None] + sla.solve_triangular(r.schur_chol, z, lower=True, trans="T",
                                                      check_finite=False)
        curves.append((r.basis @ hs).T)
    H = np.vstack(curves)
    rr = np.exp(H)
    return LatentSummary(
        time=np.arange(spec.T),
        h_mean=H.mean(axis=0),
        h_q05=np.quantile(H, 0.05, axis=0),
        h_q95=np.quantile(H, 0.95, axis=0),
        rr_mean=rr.mean(axis=0),
        rr_q05=np.quantile(rr, 0.05, axis=0),
        rr_q95=np.quantile(rr, 0.95, axis=0),
        samples=H if keep_samples else None,
    )
