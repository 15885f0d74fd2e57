"""Within-cluster latent Gaussian models.

A cluster with ``n_c`` regions observed at ``T`` times has linear predictor

    eta[i, t] = alpha + Z[t] @ beta + sum_k f_k[t] + eps[i, t]

where the shared part ``h(t) = alpha + Z[t] @ beta + sum_k f_k[t]`` is common to
all regions of the cluster and ``eps`` is an optional per-observation effect.
The latent vector is laid out as ``[alpha, beta, f_1, ..., f_K, eps]``; the part
before ``eps`` is called the *shared* block below.

Hyperparameters live on an internal unconstrained scale: log precisions, and
``log((1 + rho) / (1 - rho))`` for the AR1 correlation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterator, Mapping, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.interpolate import BSpline
from scipy.special import gammaln

from .errors import (
    ModelError,
    NegativeCount,
    NonStationaryRho,
    PeriodTooLarge,
    ShapeMismatch,
    UnboundHyper,
)

FAMILY_LINKS = {"gaussian": "identity", "poisson": "log"}
COMPONENT_KINDS = ("intercept", "fixed_effects", "iid", "rw1", "ar1", "seasonal")
FIXED_EFFECT_PRECISION = 1e-3
LOG_2PI = math.log(2.0 * math.pi)


# ---------------------------------------------------------------------------
# hyperparameter priors
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LogGammaPrior:
    """Gamma(shape, rate) on a precision, expressed as a density of its log."""

    shape: float = 1.0
    rate: float = 1e-5

    def logpdf(self, x: float) -> float:
        a, b = self.shape, self.rate
        return a * math.log(b) - math.lgamma(a) + a * x - b * math.exp(x)


@dataclass(frozen=True)
class NormalPrior:
    """Gaussian prior parameterised by mean and *precision*."""

    mean: float = 0.0
    precision: float = 0.15

    def logpdf(self, x: float) -> float:
        return 0.5 * (math.log(self.precision) - LOG_2PI) - 0.5 * self.precision * (x - self.mean) ** 2


def prior_from_dict(d: Mapping) -> LogGammaPrior | NormalPrior:
    kind = d.get("dist", "loggamma")
    if kind == "loggamma":
        return LogGammaPrior(float(d.get("shape", 1.0)), float(d["rate"]))
    if kind == "normal":
        return NormalPrior(float(d.get("mean", 0.0)), float(d["precision"]))
    raise ModelError(f"unknown prior distribution {kind!r}")


DEFAULT_PRECISION_PRIOR = LogGammaPrior(1.0, 1e-5)
DEFAULT_EPS_PRIOR = LogGammaPrior(1.0, 5e-4)
DEFAULT_RHO_PRIOR = NormalPrior(0.0, 0.15)


@dataclass(frozen=True)
class HyperParams:
    values: Mapping[str, float]

    def __getitem__(self, name: str) -> float:
        try:
            return float(self.values[name])
        except KeyError:
            raise UnboundHyper(f"hyperparameter {name!r} is not bound") from None

    def __contains__(self, name: str) -> bool:
        return name in self.values

    def to_array(self, names: Sequence[str]) -> np.ndarray:
        return np.array([self[n] for n in names], dtype=float)

    @classmethod
    def from_array(cls, names: Sequence[str], x) -> "HyperParams":
        return cls({n: float(v) for n, v in zip(names, np.asarray(x, dtype=float))})

    def natural(self) -> dict[str, float]:
        """Values on the natural scale (precisions, correlations)."""
        out = {}
        for k, v in self.values.items():
            if k.startswith("rho"):
                out[k] = math.tanh(v / 2.0)
            else:
                out[k.replace("log_", "", 1)] = math.exp(v)
        return out


def rho_to_internal(rho: float) -> float:
    return math.log((1.0 + rho) / (1.0 - rho))


def rho_from_internal(x: float) -> float:
    return math.tanh(x / 2.0)


# ---------------------------------------------------------------------------
# model description
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LatentComponent:
    kind: str
    period: int | None = None
    name: str | None = None
    priors: Mapping[str, object] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in COMPONENT_KINDS:
            raise ModelError(f"unknown component kind {self.kind!r}")
        if self.kind == "seasonal" and (self.period is None or self.period < 2):
            raise ModelError("seasonal component needs a period m >= 2")

    @property
    def label(self) -> str:
        return self.name or self.kind

    @property
    def hyper_slots(self) -> tuple[str, ...]:
        if self.kind in ("intercept", "fixed_effects"):
            return ()
        if self.kind == "ar1":
            return (f"log_kappa_{self.label}", f"rho_{self.label}")
        return (f"log_prec_{self.label}",)

    def prior_for(self, slot: str):
        if slot in self.priors:
            return self.priors[slot]
        if slot.startswith("rho"):
            return DEFAULT_RHO_PRIOR
        return DEFAULT_PRECISION_PRIOR


@dataclass(frozen=True, eq=False)
class ModelSpec:
    family: str
    components: tuple[LatentComponent, ...]
    T: int
    has_error_term: bool = False
    covariate_basis: np.ndarray | None = None
    eps_prior: LogGammaPrior = DEFAULT_EPS_PRIOR
    obs_prior: LogGammaPrior = DEFAULT_EPS_PRIOR
    # sum-to-zero on rw1 blocks; None means "on when an intercept is present"
    sum_to_zero: bool | None = None

    def __post_init__(self):
        if self.family not in FAMILY_LINKS:
            raise ModelError(f"unsupported family {self.family!r}")
        if self.T < 2:
            raise ModelError("need at least two time points")
        comps = tuple(self.components)
        object.__setattr__(self, "components", comps)
        labels = [c.label for c in comps]
        if len(set(labels)) != len(labels):
            raise ModelError(f"component names must be unique, got {labels}")
        if sum(c.kind == "intercept" for c in comps) > 1:
            raise ModelError("at most one intercept")
        if self.family == "gaussian" and self.has_error_term:
            raise ModelError("gaussian family has an observation precision; an eps term is not identifiable")
        if self.covariate_basis is not None:
            Z = np.asarray(self.covariate_basis, dtype=float)
            if Z.ndim != 2 or Z.shape[0] != self.T:
                raise ShapeMismatch(f"covariate_basis must be T x p, got {Z.shape}")
            object.__setattr__(self, "covariate_basis", Z)
        if any(c.kind == "fixed_effects" for c in comps) and self.covariate_basis is None:
            raise ModelError("fixed_effects component requires a covariate_basis")
        for c in comps:
            if c.kind == "seasonal" and c.period > self.T:
                raise PeriodTooLarge(f"seasonal period {c.period} exceeds T={self.T}")

    @property
    def link(self) -> str:
        return FAMILY_LINKS[self.family]

    @property
    def p(self) -> int:
        return 0 if self.covariate_basis is None else self.covariate_basis.shape[1]

    @property
    def constrain_rw1(self) -> bool:
        if self.sum_to_zero is None:
            return any(c.kind == "intercept" for c in self.components)
        return self.sum_to_zero

    @property
    def hyper_names(self) -> tuple[str, ...]:
        names: list[str] = []
        for c in self.components:
            names.extend(c.hyper_slots)
        if self.has_error_term:
            names.append("log_prec_eps")
        if self.family == "gaussian":
            names.append("log_prec_obs")
        return tuple(names)

    def priors(self) -> Iterator[tuple[str, object]]:
        for c in self.components:
            for slot in c.hyper_slots:
                yield slot, c.prior_for(slot)
        if self.has_error_term:
            yield "log_prec_eps", self.eps_prior
        if self.family == "gaussian":
            yield "log_prec_obs", self.obs_prior


@dataclass(frozen=True, eq=False)
class ClusterData:
    y: np.ndarray
    offset: np.ndarray
    region_indices: tuple[int, ...]

    def __post_init__(self):
        y = np.atleast_2d(np.asarray(self.y, dtype=float))
        off = np.atleast_2d(np.asarray(self.offset, dtype=float))
        if off.shape != y.shape:
            raise ShapeMismatch(f"offset shape {off.shape} != y shape {y.shape}")
        if not np.all(np.isfinite(off)):
            raise ModelError("offsets must be finite")
        if not np.all(np.isfinite(y)):
            raise ModelError("missing or non-finite observations are not supported")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "offset", off)
        object.__setattr__(self, "region_indices", tuple(int(i) for i in self.region_indices))
        if len(self.region_indices) != y.shape[0]:
            raise ShapeMismatch("region_indices length must equal the number of rows of y")

    @property
    def n_regions(self) -> int:
        return self.y.shape[0]

    @property
    def T(self) -> int:
        return self.y.shape[1]

    @property
    def time_index(self) -> np.ndarray:
        return np.arange(self.T)


# ---------------------------------------------------------------------------
# precision structures
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PrecisionStructure:
    matrix: sp.csr_matrix
    rank: int
    log_gdet_structure: float

    @property
    def dense(self) -> np.ndarray:
        return self.matrix.toarray()


def _first_difference(T: int) -> sp.csr_matrix:
    return sp.diags([-np.ones(T - 1), np.ones(T - 1)], [0, 1], shape=(T - 1, T), format="csr")


def _seasonal_sums(T: int, m: int) -> sp.csr_matrix:
    rows = T - m + 1
    return sp.diags([np.ones(rows)] * m, list(range(m)), shape=(rows, T), format="csr")


@lru_cache(maxsize=256)
def _structure_cached(kind: str, T: int, m: int | None) -> PrecisionStructure:
    if kind == "iid":
        S = sp.identity(T, format="csr")
        return PrecisionStructure(S, T, 0.0)
    if kind == "rw1":
        D = _first_difference(T)
        S = (D.T @ D).tocsr()
        rank = T - 1
    elif kind == "seasonal":
        A = _seasonal_sums(T, m)
        S = (A.T @ A).tocsr()
        rank = T - m + 1
    else:
        raise ModelError(f"no structure matrix for kind {kind!r}")
    eig = np.linalg.eigvalsh(S.toarray())
    # generalized determinant: product of the `rank` nonzero eigenvalues
    log_gdet = float(np.sum(np.log(eig[-rank:])))
    return PrecisionStructure(S, rank, log_gdet)


def structure_matrix(kind: str, T: int, m: int | None = None) -> PrecisionStructure:
    """Unit-precision structure matrix of an intrinsic or iid temporal effect.

    ``rw1`` is ``D.T @ D`` for the first-difference operator (rank ``T - 1``);
    ``seasonal`` is ``A.T @ A`` where row ``t`` of ``A`` sums entries
    ``t .. t+m-1`` (rank ``T - m + 1``); ``iid`` is the identity.
    """
    if T < 2:
        raise ModelError("T must be >= 2")
    if kind == "seasonal":
        if m is None or m < 2:
            raise ModelError("seasonal structure needs a period m >= 2")
        if m > T:
            raise PeriodTooLarge(f"period {m} exceeds T={T}")
    else:
        m = None
    return _structure_cached(kind, int(T), m)


def ar1_precision(T: int, v: float, rho: float) -> PrecisionStructure:
    """Precision of a stationary AR1 with innovation precision ``v``.

    ``f_1 ~ N(0, 1 / (v (1 - rho^2)))`` and ``f_t = rho f_{t-1} + N(0, 1/v)``.
    """
    if not (-1.0 < rho < 1.0):
        raise NonStationaryRho(f"|rho| must be < 1, got {rho}")
    if v <= 0:
        raise ModelError("AR1 precision v must be positive")
    diag = np.full(T, 1.0 + rho * rho)
    diag[0] = diag[-1] = 1.0
    off = np.full(T - 1, -rho)
    Q = v * sp.diags([off, diag, off], [-1, 0, 1], format="csr")
    log_det = T * math.log(v) + math.log1p(-rho * rho)
    return PrecisionStructure(Q.tocsr(), T, log_det)


@lru_cache(maxsize=64)
def _sum_to_zero_basis(T: int) -> np.ndarray:
    """Orthonormal basis (T x T-1) of the vectors summing to zero."""
    A = np.eye(T)[:, : T - 1] - 1.0 / T
    Qm, _ = np.linalg.qr(np.column_stack([np.ones(T), A]))
    return Qm[:, 1:]


# ---------------------------------------------------------------------------
# latent layout: design of the shared block and theta-dependent precision
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class _Block:
    component: LatentComponent
    sl: slice
    basis: np.ndarray          # T x width, maps block coordinates to h(t)
    structure: np.ndarray | None   # width x width unit structure (None for ar1 / fixed)
    rank: int
    log_gdet_structure: float


class LatentLayout:
    """Shared-block design and precision assembly for one :class:`ModelSpec`.

    ``basis`` (T x dim_h) maps the shared latent coordinates to ``h(t)``. A
    sum-to-zero constrained rw1 block is stored in ``T - 1`` coordinates of the
    orthonormal complement of the constant vector, so the constraint holds by
    construction and the block precision keeps the generalized determinant of
    the unconstrained structure.
    """

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        T = spec.T
        blocks: list[_Block] = []
        cols: list[np.ndarray] = []
        start = 0
        for comp in spec.components:
            if comp.kind == "intercept":
                basis = np.ones((T, 1))
                blocks.append(_Block(comp, slice(start, start + 1), basis, None, 1, 0.0))
            elif comp.kind == "fixed_effects":
                basis = spec.covariate_basis
                w = basis.shape[1]
                blocks.append(_Block(comp, slice(start, start + w), basis, None, w, 0.0))
            elif comp.kind == "ar1":
                basis = np.eye(T)
                blocks.append(_Block(comp, slice(start, start + T), basis, None, T, 0.0))
            else:
                ps = structure_matrix(comp.kind, T, comp.period)
                S = ps.dense
                basis = np.eye(T)
                if comp.kind == "rw1" and spec.constrain_rw1:
                    V = _sum_to_zero_basis(T)
                    basis = V
                    S = V.T @ S @ V
                blocks.append(_Block(comp, slice(start, start + basis.shape[1]), basis, S,
                                     ps.rank, ps.log_gdet_structure))
            cols.append(basis)
            start += basis.shape[1]
        self.blocks = tuple(blocks)
        self.dim_h = start
        self.basis = np.column_stack(cols) if cols else np.zeros((T, 0))
        self.hyper_names = spec.hyper_names

    def shared_precision(self, theta: HyperParams) -> tuple[np.ndarray, int, float]:
        """Prior precision of the shared block with its rank and log |Q|*."""
        Q = np.zeros((self.dim_h, self.dim_h))
        rank = 0
        log_gdet = 0.0
        for b in self.blocks:
            kind = b.component.kind
            sl = b.sl
            if kind in ("intercept", "fixed_effects"):
                w = sl.stop - sl.start
                Q[sl, sl] = FIXED_EFFECT_PRECISION * np.eye(w)
                rank += w
                log_gdet += w * math.log(FIXED_EFFECT_PRECISION)
            elif kind == "ar1":
                kappa_name, rho_name = b.component.hyper_slots
                rho = rho_from_internal(theta[rho_name])
                v = math.exp(theta[kappa_name]) / (1.0 - rho * rho)
                ps = ar1_precision(self.spec.T, v, rho)
                Q[sl, sl] = ps.dense
                rank += ps.rank
                log_gdet += ps.log_gdet_structure
            else:
                (slot,) = b.component.hyper_slots
                log_nu = theta[slot]
                Q[sl, sl] = math.exp(log_nu) * b.structure
                rank += b.rank
                log_gdet += b.rank * log_nu + b.log_gdet_structure
        return Q, rank, log_gdet

    def eps_precision(self, theta: HyperParams) -> float | None:
        return math.exp(theta["log_prec_eps"]) if self.spec.has_error_term else None

    def obs_precision(self, theta: HyperParams) -> float | None:
        return math.exp(theta["log_prec_obs"]) if self.spec.family == "gaussian" else None


@lru_cache(maxsize=32)
def layout_for(spec: ModelSpec) -> LatentLayout:
    return LatentLayout(spec)


def assemble_joint_precision(spec: ModelSpec, theta: HyperParams, cluster_size: int):
    """Block-diagonal prior precision over the full latent vector of a cluster.

    Returns ``(Q, rank, log_gdet)`` with ``Q`` sparse. Rank-deficient blocks
    contribute their generalized determinant.
    """
    missing = [n for n in spec.hyper_names if n not in theta]
    if missing:
        raise UnboundHyper(f"unbound hyperparameters: {missing}")
    lay = layout_for(spec)
    Qh, rank, log_gdet = lay.shared_precision(theta)
    blocks = [sp.csr_matrix(Qh)]
    if spec.has_error_term:
        tau = lay.eps_precision(theta)
        n_eps = cluster_size * spec.T
        blocks.append(tau * sp.identity(n_eps, format="csr"))
        rank += n_eps
        log_gdet += n_eps * math.log(tau)
    return sp.block_diag(blocks, format="csr"), rank, log_gdet


# ---------------------------------------------------------------------------
# design map
# ---------------------------------------------------------------------------

class DesignMap:
    """Linear map from the latent vector of a cluster to its predictor matrix."""

    def __init__(self, basis: np.ndarray, n_regions: int, has_eps: bool):
        self.basis = basis
        self.n_regions = n_regions
        self.T, self.dim_h = basis.shape
        self.has_eps = has_eps
        self.n_latent = self.dim_h + (n_regions * self.T if has_eps else 0)

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        shared = self.basis @ x[: self.dim_h]
        eta = np.broadcast_to(shared, (self.n_regions, self.T)).copy()
        if self.has_eps:
            eta += x[self.dim_h:].reshape(self.n_regions, self.T)
        return eta

    def rmatvec(self, u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=float).reshape(self.n_regions, self.T)
        head = self.basis.T @ u.sum(axis=0)
        if self.has_eps:
            return np.concatenate([head, u.ravel()])
        return head

    def as_matrix(self) -> np.ndarray:
        rows = np.tile(self.basis, (self.n_regions, 1))
        if self.has_eps:
            rows = np.hstack([rows, np.eye(self.n_regions * self.T)])
        return rows


def design_map(spec: ModelSpec, cluster_size: int) -> DesignMap:
    return DesignMap(layout_for(spec).basis, int(cluster_size), spec.has_error_term)


# ---------------------------------------------------------------------------
# likelihood
# ---------------------------------------------------------------------------

def log_likelihood_terms(data: ClusterData, eta: np.ndarray, family: str,
                         obs_precision: float | None = None):
    """Log-likelihood with elementwise first and negative second derivatives in eta."""
    eta = np.asarray(eta, dtype=float)
    y = data.y
    if eta.shape != y.shape:
        raise ShapeMismatch(f"eta shape {eta.shape} != y shape {y.shape}")
    if family == "poisson":
        if np.any(y < 0):
            raise NegativeCount("poisson observations must be non-negative")
        lin = data.offset + eta
        mu = np.exp(lin)
        loglik = float(np.sum(y * lin - mu - gammaln(y + 1.0)))
        return loglik, y - mu, mu
    if family == "gaussian":
        if obs_precision is None:
            raise UnboundHyper("gaussian likelihood needs the observation precision")
        tau = float(obs_precision)
        r = y - data.offset - eta
        loglik = float(y.size * 0.5 * (math.log(tau) - LOG_2PI) - 0.5 * tau * np.sum(r * r))
        return loglik, tau * r, np.full_like(y, tau)
    raise ModelError(f"unsupported family {family!r}")


def log_hyper_prior(theta: HyperParams, spec: ModelSpec) -> float:
    return float(sum(prior.logpdf(theta[name]) for name, prior in spec.priors()))


# ---------------------------------------------------------------------------
# covariate bases
# ---------------------------------------------------------------------------

def time_grid(T: int) -> np.ndarray:
    """Observation times standardised to [0, 1]."""
    return np.linspace(0.0, 1.0, T)


def monomial_basis(T: int, degree: int) -> np.ndarray:
    t = time_grid(T)
    return np.column_stack([t ** k for k in range(1, degree + 1)])


def bspline_basis(T: int, n_basis: int, degree: int = 3) -> np.ndarray:
    """``n_basis`` B-splines of the given degree with equally spaced knots on [0, 1]."""
    if n_basis <= degree:
        raise ModelError("n_basis must exceed the spline degree")
    n_interior = n_basis - degree - 1
    inner = np.linspace(0.0, 1.0, n_interior + 2)
    knots = np.concatenate([np.zeros(degree), inner, np.ones(degree)])
    t = time_grid(T)
    return BSpline.design_matrix(t, knots, degree).toarray()
