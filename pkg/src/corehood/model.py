"""Negative-binomial count regression with spatially filtered random effects.

The mean structure is log E[Y] = beta0 + X beta (+ E gamma), with NB2
dispersion phi (Var[Y] = mu + mu^2 / phi). Four prior variants:

* NB_RIDGE: no spatial term; beta_j | tau ~ N(0, tau), tau ~ HalfCauchy(1).
* BSF: gamma | rho ~ N(0, (rho E'QE)^-1) with Q the connectivity Laplacian
  and rho ~ Gamma(0.5, 2000).
* ESF: gamma_l | rho ~ N(0, rho lambda_l); rho^-2 | nu ~ Gamma(nu/2, nu/2),
  nu ~ Gamma(2, 0.1) truncated above at 2.
* RE_ESF: gamma_l | rho, omega ~ N(0, rho lw_l(omega)) with the eigenvalue
  reweighting lw_l = (sum lambda / sum lambda^omega) lambda_l^omega and
  omega^-1 ~ Gamma(2, 5); rho ~ HalfCauchy(1).

Covariates are decorrelated through a thin QR factorization before
sampling; sampled coefficients are mapped back to the feature scale for
reporting. Every positive parameter is sampled on the log scale. Gamma
distributions are shape/rate throughout unless stated otherwise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np
import scipy.linalg
from scipy.special import digamma, expit, gammaln

from . import hmc
from .features import FeatureMatrix, Standardization
from .spatial_filter import EigenBasis

VARIANTS = ("NB_RIDGE", "BSF", "ESF", "RE_ESF")
SPATIAL_VARIANTS = ("BSF", "ESF", "RE_ESF")

LOG_2PI = math.log(2.0 * math.pi)


class ConvergenceError(RuntimeError):
    pass


class SamplingError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# NB2 likelihood

def nb2_logpmf(y, mu, phi):
    """Log pmf of the mean/shape negative binomial.

    P(y) = C(y + phi - 1, y) (mu/(mu+phi))^y (phi/(mu+phi))^phi, giving
    E[Y] = mu and Var[Y] = mu + mu^2/phi. Vectorized over any argument.
    """
    y = np.asarray(y)
    mu = np.asarray(mu, dtype=float)
    phi = np.asarray(phi, dtype=float)
    if np.any(mu <= 0) or np.any(phi <= 0):
        raise ValueError("nb2_logpmf requires mu > 0 and phi > 0")
    if np.any(y < 0):
        raise ValueError("nb2_logpmf requires y >= 0")
    return (gammaln(y + phi) - gammaln(phi) - gammaln(y + 1)
            + y * np.log(mu) + phi * np.log(phi)
            - (y + phi) * np.log(mu + phi))


def nb2_rvs(mu, phi, rng: np.random.Generator, size=None):
    """Draw NB2 counts via the gamma-Poisson mixture (phi need not be integer)."""
    lam = rng.gamma(shape=phi, scale=np.asarray(mu, dtype=float) / phi, size=size)
    return rng.poisson(lam)


# --------------------------------------------------------------------------
# QR decorrelation

@dataclass
class QrTransform:
    """Thin QR of the design, scaled so decorrelated columns have unit
    sample variance: X = q_star @ r_star with q_star = Q sqrt(n-1)."""

    q_star: np.ndarray
    r_star: np.ndarray

    def to_design(self, beta: np.ndarray) -> np.ndarray:
        """Feature-scale coefficients -> decorrelated coefficients."""
        return self.r_star @ beta

    def to_features(self, beta_tilde: np.ndarray) -> np.ndarray:
        """Decorrelated coefficients -> feature-scale coefficients."""
        return scipy.linalg.solve_triangular(self.r_star, np.asarray(beta_tilde).T,
                                             lower=False).T


def qr_decorrelate(x: np.ndarray) -> QrTransform:
    x = np.asarray(x, dtype=float)
    n, p = x.shape
    q, r = np.linalg.qr(x)
    diag = np.diag(r)
    tol = np.abs(diag).max() * max(n, p) * np.finfo(float).eps if p else 0.0
    if np.any(np.abs(diag) <= tol):
        bad = sorted(int(j) for j in np.nonzero(np.abs(diag) <= tol)[0])
        raise ValueError(f"design is rank deficient at column(s) {bad}")
    signs = np.sign(diag)
    q = q * signs
    r = signs[:, None] * r
    scale = math.sqrt(max(n - 1, 1))
    return QrTransform(q_star=q * scale, r_star=r / scale)


# --------------------------------------------------------------------------
# model data and parameters

@dataclass
class ModelSpec:
    """What to fit and how to sample it."""

    variant: str = "BSF"
    feature_selection: str = "full"
    connectivity_kind: str = "contiguity"
    corehood_radius_m: float = 804.672
    chains: int = 4
    warmup: int = 15000
    iterations: int = 5000
    seed: int = 0
    target_accept: float = 0.8
    max_leapfrog: int = 32
    eigen_threshold: float = 0.25
    rho_parameterization: str = "rate"   # Gamma(0.5, 2000): rate or scale
    decorrelate: bool = True
    check_rhat: bool = True
    rhat_limit: float = 1.05

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected {VARIANTS}")
        if self.chains < 2:
            raise ValueError("need at least 2 chains")
        if self.warmup <= 0 or self.iterations <= 0:
            raise ValueError("warmup and iterations must be > 0")
        if self.rho_parameterization not in ("rate", "scale"):
            raise ValueError("rho_parameterization must be 'rate' or 'scale'")

    def with_profile(self, profile: str) -> "ModelSpec":
        budgets = {"paper": (15000, 5000), "desk": (1000, 1000)}
        if profile not in budgets:
            raise ValueError(f"unknown profile {profile!r}; expected paper or desk")
        w, it = budgets[profile]
        out = ModelSpec(**{**self.__dict__, "warmup": w, "iterations": it})
        return out


@dataclass
class ModelData:
    """Arrays a model variant is fit to. ``design`` is what the sampled
    coefficients multiply (the decorrelated matrix when QR is on)."""

    y: np.ndarray
    design: np.ndarray
    x: np.ndarray
    feature_names: list[str]
    qr: QrTransform | None = None
    basis: EigenBasis | None = None
    penalty: np.ndarray | None = None          # E'QE for BSF
    penalty_logdet: float | None = None
    standardization: Standardization | None = None
    core_ids: list[str] | None = None
    raw_counts: np.ndarray | None = None       # unrounded fractional counts

    @property
    def n_units(self) -> int:
        return self.y.shape[0]

    @property
    def n_features(self) -> int:
        return self.design.shape[1]

    @property
    def n_vectors(self) -> int:
        return 0 if self.basis is None else self.basis.size


def prepare_model_data(counts: np.ndarray, features: FeatureMatrix,
                       variant: str, basis: EigenBasis | None = None,
                       laplacian=None, decorrelate: bool = True) -> ModelData:
    """Round fractional counts half-to-even for the NB likelihood, decorrelate
    the design, and precompute the BSF penalty E'QE."""
    raw = np.asarray(counts, dtype=float)
    y = np.rint(raw).astype(np.int64)
    x = features.X
    qr = qr_decorrelate(x) if decorrelate else None
    design = qr.q_star if qr is not None else x
    penalty = penalty_logdet = None
    if variant in SPATIAL_VARIANTS and basis is None:
        raise ValueError(f"variant {variant} requires an eigenvector basis")
    if variant == "BSF":
        if laplacian is None:
            raise ValueError("BSF requires the connectivity Laplacian")
        q = laplacian.matrix if hasattr(laplacian, "matrix") else np.asarray(laplacian)
        penalty = basis.vectors.T @ q @ basis.vectors
        penalty = (penalty + penalty.T) / 2.0
        try:
            chol = np.linalg.cholesky(penalty)
        except np.linalg.LinAlgError:
            raise ValueError(
                "E'QE is not positive definite; is the connectivity graph connected?")
        penalty_logdet = 2.0 * float(np.sum(np.log(np.diag(chol))))
    return ModelData(
        y=y, design=design, x=x, feature_names=list(features.names), qr=qr,
        basis=basis if variant in SPATIAL_VARIANTS else None,
        penalty=penalty, penalty_logdet=penalty_logdet,
        standardization=features.standardization, core_ids=list(features.core_ids),
        raw_counts=raw,
    )


@dataclass
class ModelParams:
    """Natural-scale parameters; ``beta`` acts on ``ModelData.design``."""

    beta0: float
    beta: np.ndarray
    tau: float
    phi: float
    gamma: np.ndarray | None = None
    rho: float | None = None
    nu: float | None = None
    omega: float | None = None

    def __post_init__(self):
        for name in ("tau", "phi", "rho", "nu", "omega"):
            v = getattr(self, name)
            if v is not None and v <= 0:
                raise ValueError(f"{name} must be > 0, got {v}")


# --------------------------------------------------------------------------
# densities

def _halfcauchy_logpdf(x: float, scale: float) -> float:
    return math.log(2.0 / (math.pi * scale)) - math.log1p((x / scale) ** 2)


def _gamma_logpdf(x: float, shape: float, rate: float) -> float:
    return (shape * math.log(rate) - gammaln(shape)
            + (shape - 1.0) * math.log(x) - rate * x)


def _reweighted_eigenvalues(lambdas: np.ndarray, omega: float) -> np.ndarray:
    """Spatial-variance scaling lw_l = (sum lambda / sum lambda^omega) lambda_l^omega;
    at omega = 1 this is the identity."""
    pow_ = lambdas ** omega
    return (lambdas.sum() / pow_.sum()) * pow_


def linear_predictor(params: ModelParams, data: ModelData) -> np.ndarray:
    eta = params.beta0 + data.design @ params.beta
    if params.gamma is not None and data.basis is not None:
        eta = eta + data.basis.vectors @ params.gamma
    return eta


def loglik_pointwise(params: ModelParams, data: ModelData) -> np.ndarray:
    mu = np.exp(linear_predictor(params, data))
    return nb2_logpmf(data.y, mu, params.phi)


def log_posterior(params: ModelParams, data: ModelData, variant: str,
                  rho_parameterization: str = "rate") -> float:
    """Joint log density (likelihood plus priors) at natural-scale parameters.

    Fully normalized in every term that depends on the parameters; raises on
    a non-finite result, naming the offending block.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    parts: dict[str, float] = {}
    parts["likelihood"] = float(np.sum(loglik_pointwise(params, data)))

    p = len(params.beta)
    parts["beta0"] = -0.5 * params.beta0 ** 2 - 0.5 * LOG_2PI
    parts["beta"] = (-0.5 * float(params.beta @ params.beta) / params.tau ** 2
                     - p * math.log(params.tau) - 0.5 * p * LOG_2PI)
    parts["tau"] = _halfcauchy_logpdf(params.tau, 1.0)
    parts["phi"] = _halfcauchy_logpdf(params.phi, 5.0)

    if variant in SPATIAL_VARIANTS:
        if params.gamma is None or params.rho is None:
            raise ValueError(f"variant {variant} requires gamma and rho")
        g = params.gamma
        ll = len(g)
        if variant == "BSF":
            quad = float(g @ data.penalty @ g)
            parts["gamma"] = (0.5 * ll * math.log(params.rho)
                              + 0.5 * data.penalty_logdet
                              - 0.5 * params.rho * quad - 0.5 * ll * LOG_2PI)
            if rho_parameterization == "rate":
                parts["rho"] = _gamma_logpdf(params.rho, 0.5, 2000.0)
            else:
                parts["rho"] = _gamma_logpdf(params.rho, 0.5, 1.0 / 2000.0)
        else:
            lams = data.basis.values
            if variant == "RE_ESF":
                if params.omega is None:
                    raise ValueError("RE_ESF requires omega")
                lams = _reweighted_eigenvalues(lams, params.omega)
                parts["omega"] = (_gamma_logpdf(1.0 / params.omega, 2.0, 5.0)
                                  - 2.0 * math.log(params.omega))
                parts["rho"] = _halfcauchy_logpdf(params.rho, 1.0)
            else:  # ESF
                if params.nu is None:
                    raise ValueError("ESF requires nu")
                if params.nu >= 2.0:
                    return -math.inf
                half_nu = params.nu / 2.0
                parts["rho"] = (_gamma_logpdf(params.rho ** -2, half_nu, half_nu)
                                + math.log(2.0) - 3.0 * math.log(params.rho))
                parts["nu"] = _gamma_logpdf(params.nu, 2.0, 0.1)
            var = params.rho * lams
            parts["gamma"] = float(-0.5 * np.sum(g * g / var)
                                   - 0.5 * np.sum(np.log(var)) - 0.5 * ll * LOG_2PI)

    total = sum(parts.values())
    if not math.isfinite(total):
        bad = [k for k, v in parts.items() if not math.isfinite(v)]
        raise FloatingPointError(f"non-finite log posterior in block(s): {bad}")
    return total


# --------------------------------------------------------------------------
# unconstrained parameterization

class ModelDensity:
    """Unconstrained-scale joint density with analytic gradient.

    Layout of theta: [beta0, beta (P), log tau, log phi] plus, for spatial
    variants, [gamma (L), log rho] and then log-odds nu / log omega as the
    variant requires. Positive parameters carry their log-transform
    Jacobians so the density is proper over theta.
    """

    def __init__(self, data: ModelData, variant: str,
                 rho_parameterization: str = "rate"):
        if variant not in VARIANTS:
            raise ValueError(f"unknown variant {variant!r}")
        self.data = data
        self.variant = variant
        self.rho_parameterization = rho_parameterization
        p, ll = data.n_features, data.n_vectors
        names = ["beta0"] + [f"beta[{j}]" for j in range(p)] + ["tau", "phi"]
        self._i_beta = slice(1, 1 + p)
        self._i_tau = 1 + p
        self._i_phi = 2 + p
        self._i_gamma = self._i_rho = self._i_extra = None
        if variant in SPATIAL_VARIANTS:
            names += [f"gamma[{k}]" for k in range(ll)] + ["rho"]
            self._i_gamma = slice(3 + p, 3 + p + ll)
            self._i_rho = 3 + p + ll
            if variant == "ESF":
                names.append("nu")
                self._i_extra = 4 + p + ll
            elif variant == "RE_ESF":
                names.append("omega")
                self._i_extra = 4 + p + ll
        self.names = names
        self.dim = len(names)

    # -- packing ------------------------------------------------------------

    def unpack(self, theta: np.ndarray) -> ModelParams:
        theta = np.asarray(theta, dtype=float)
        p = ModelParams(
            beta0=float(theta[0]),
            beta=theta[self._i_beta].copy(),
            tau=float(np.exp(theta[self._i_tau])),
            phi=float(np.exp(theta[self._i_phi])),
        )
        if self._i_gamma is not None:
            p.gamma = theta[self._i_gamma].copy()
            p.rho = float(np.exp(theta[self._i_rho]))
            if self.variant == "ESF":
                p.nu = float(2.0 * expit(theta[self._i_extra]))
            elif self.variant == "RE_ESF":
                p.omega = float(np.exp(theta[self._i_extra]))
        return p

    def pack(self, params: ModelParams) -> np.ndarray:
        theta = np.zeros(self.dim)
        theta[0] = params.beta0
        theta[self._i_beta] = params.beta
        theta[self._i_tau] = math.log(params.tau)
        theta[self._i_phi] = math.log(params.phi)
        if self._i_gamma is not None:
            theta[self._i_gamma] = params.gamma
            theta[self._i_rho] = math.log(params.rho)
            if self.variant == "ESF":
                q = params.nu / 2.0
                theta[self._i_extra] = math.log(q) - math.log1p(-q)
            elif self.variant == "RE_ESF":
                theta[self._i_extra] = math.log(params.omega)
        return theta

    def _jacobian(self, theta: np.ndarray) -> float:
        j = float(theta[self._i_tau] + theta[self._i_phi])
        if self._i_rho is not None:
            j += float(theta[self._i_rho])
        if self.variant == "ESF":
            u = float(theta[self._i_extra])
            s = expit(u)
            j += math.log(2.0) + math.log(s) + math.log1p(-s)
        elif self.variant == "RE_ESF":
            j += float(theta[self._i_extra])
        return j

    def log_density(self, theta: np.ndarray) -> float:
        params = self.unpack(theta)
        try:
            lp = log_posterior(params, self.data, self.variant,
                               self.rho_parameterization)
        except FloatingPointError:
            return -math.inf
        return lp + self._jacobian(theta)

    # -- gradient -----------------------------------------------------------

    def log_density_grad(self, theta: np.ndarray) -> tuple[float, np.ndarray]:
        """Value and gradient of ``log_density``, both on the unconstrained
        scale. Overflow in mu maps to -inf with a zero gradient (rejected by
        the sampler)."""
        data = self.data
        params = self.unpack(theta)
        y = data.y
        grad = np.zeros(self.dim)

        eta = linear_predictor(params, data)
        with np.errstate(over="raise"):
            try:
                mu = np.exp(eta)
            except FloatingPointError:
                return -math.inf, grad
        phi, tau = params.phi, params.tau
        mu_phi = mu + phi

        lp = float(np.sum(gammaln(y + phi) - gammaln(phi) - gammaln(y + 1)
                          + y * eta + phi * math.log(phi)
                          - (y + phi) * np.log(mu_phi)))
        g_eta = y - mu * (y + phi) / mu_phi
        dll_dphi = float(np.sum(digamma(y + phi) - digamma(phi)
                                + math.log(phi) + 1.0
                                - np.log(mu_phi) - (y + phi) / mu_phi))

        grad[0] = float(np.sum(g_eta))
        grad[self._i_beta] = data.design.T @ g_eta

        # beta0 ~ N(0,1); beta | tau ~ N(0, tau); tau, phi half-Cauchy
        p = data.n_features
        bb = float(params.beta @ params.beta)
        lp += -0.5 * params.beta0 ** 2 - 0.5 * LOG_2PI
        lp += -0.5 * bb / tau ** 2 - p * math.log(tau) - 0.5 * p * LOG_2PI
        lp += _halfcauchy_logpdf(tau, 1.0) + _halfcauchy_logpdf(phi, 5.0)
        grad[0] += -params.beta0
        grad[self._i_beta] += -params.beta / tau ** 2
        d_tau = bb / tau ** 3 - p / tau - 2.0 * tau / (1.0 + tau ** 2)
        d_phi = dll_dphi - 2.0 * phi / (25.0 + phi ** 2)
        grad[self._i_tau] = tau * d_tau + 1.0
        grad[self._i_phi] = phi * d_phi + 1.0

        if self.variant in SPATIAL_VARIANTS:
            g = params.gamma
            rho = params.rho
            ll = len(g)
            grad[self._i_gamma] = data.basis.vectors.T @ g_eta
            if self.variant == "BSF":
                ag = data.penalty @ g
                quad = float(g @ ag)
                lp += (0.5 * ll * math.log(rho) + 0.5 * data.penalty_logdet
                       - 0.5 * rho * quad - 0.5 * ll * LOG_2PI)
                grad[self._i_gamma] += -rho * ag
                if self.rho_parameterization == "rate":
                    lp += _gamma_logpdf(rho, 0.5, 2000.0)
                    d_rho = 0.5 * ll / rho - 0.5 * quad - 0.5 / rho - 2000.0
                else:
                    lp += _gamma_logpdf(rho, 0.5, 1.0 / 2000.0)
                    d_rho = 0.5 * ll / rho - 0.5 * quad - 0.5 / rho - 1.0 / 2000.0
                grad[self._i_rho] = rho * d_rho + 1.0
            else:
                lams = data.basis.values
                if self.variant == "RE_ESF":
                    omega = params.omega
                    pow_ = lams ** omega
                    s = lams.sum() / pow_.sum()
                    lw = s * pow_
                    var = rho * lw
                    lp += float(-0.5 * np.sum(g * g / var)
                                - 0.5 * np.sum(np.log(var)) - 0.5 * ll * LOG_2PI)
                    grad[self._i_gamma] += -g / var
                    quad_terms = g * g / var
                    d_rho = float(0.5 * np.sum(quad_terms) / rho - 0.5 * ll / rho)
                    lp += _halfcauchy_logpdf(rho, 1.0)
                    d_rho += -2.0 * rho / (1.0 + rho ** 2)
                    grad[self._i_rho] = rho * d_rho + 1.0
                    # omega enters through lw_l; c_l = d log lw_l / d omega
                    log_l = np.log(lams)
                    c = log_l - float(np.sum(pow_ * log_l) / pow_.sum())
                    d_omega = float(0.5 * np.sum(c * (quad_terms - 1.0)))
                    lp += _gamma_logpdf(1.0 / omega, 2.0, 5.0) - 2.0 * math.log(omega)
                    d_omega += -3.0 / omega + 5.0 / omega ** 2
                    grad[self._i_extra] = omega * d_omega + 1.0
                else:  # ESF
                    nu = params.nu
                    if nu >= 2.0:
                        return -math.inf, np.zeros(self.dim)
                    var = rho * lams
                    lp += float(-0.5 * np.sum(g * g / var)
                                - 0.5 * np.sum(np.log(var)) - 0.5 * ll * LOG_2PI)
                    grad[self._i_gamma] += -g / var
                    quad_sum = float(np.sum(g * g / lams))
                    d_rho = 0.5 * quad_sum / rho ** 2 - 0.5 * ll / rho
                    half_nu = nu / 2.0
                    inv2 = rho ** -2
                    lp += (_gamma_logpdf(inv2, half_nu, half_nu)
                           + math.log(2.0) - 3.0 * math.log(rho))
                    d_rho += -(nu - 2.0) / rho + nu * rho ** -3 - 3.0 / rho
                    grad[self._i_rho] = rho * d_rho + 1.0
                    lp += _gamma_logpdf(nu, 2.0, 0.1)
                    d_nu = (0.5 * math.log(half_nu) + 0.5
                            - 0.5 * digamma(half_nu)
                            - math.log(rho) - 0.5 * inv2)
                    d_nu += 1.0 / nu - 0.1
                    sig = nu / 2.0
                    grad[self._i_extra] = d_nu * nu * (1.0 - sig) + (1.0 - 2.0 * sig)

        lp += self._jacobian(theta)
        if not math.isfinite(lp):
            return -math.inf, np.zeros(self.dim)
        return lp, grad


# --------------------------------------------------------------------------
# sampling

@dataclass
class PosteriorSamples:
    """Post-warmup draws from every chain, natural scale, named columns.
    Feature-scale coefficients are stored as beta[<feature name>]."""

    names: list[str]
    draws: np.ndarray               # S x dim
    chain_ids: np.ndarray           # S
    seed: int
    pointwise_loglik: np.ndarray    # S x N
    design_coef: np.ndarray         # S x P, coefficients on the fitted design
    rhat: dict[str, float]
    n_divergent: int
    accept_rate: float

    @property
    def n_draws(self) -> int:
        return self.draws.shape[0]

    def column(self, name: str) -> np.ndarray:
        return self.draws[:, self.names.index(name)]

    def matrix(self, prefix: str) -> np.ndarray:
        idx = [j for j, n in enumerate(self.names) if n.startswith(prefix + "[")]
        return self.draws[:, idx]


def _initial_theta(density: ModelDensity, rng: np.random.Generator) -> np.ndarray:
    theta = 0.1 * rng.standard_normal(density.dim)
    ybar = max(float(density.data.y.mean()), 0.1)
    theta[0] = math.log(ybar) + 0.05 * rng.standard_normal()
    theta[density._i_phi] = math.log(5.0) + 0.1 * rng.standard_normal()
    if density.variant == "ESF":
        theta[density._i_extra] = 0.0  # nu = 1, safely inside (0, 2)
    return theta


def sample_posterior(spec: ModelSpec, data: ModelData) -> PosteriorSamples:
    """Run ``spec.chains`` independent Hamiltonian chains and pool the
    post-warmup draws.

    Per-chain generators derive from (seed, chain); results do not depend on
    thread count. Raises ConvergenceError when any split R-hat exceeds the
    limit and SamplingError when more than 0.1% of transitions diverge.
    """
    from .diagnostics import gelman_rubin

    density = ModelDensity(data, spec.variant, spec.rho_parameterization)
    cfg = hmc.HmcConfig(
        warmup=spec.warmup, iterations=spec.iterations,
        target_accept=spec.target_accept, max_leapfrog=spec.max_leapfrog,
    )
    seeds = np.random.SeedSequence(spec.seed).spawn(spec.chains)
    chains = []
    n_div = 0
    acc = []
    for cid in range(spec.chains):
        rng = np.random.default_rng(seeds[cid])
        theta0 = _initial_theta(density, rng)
        result = hmc.sample_chain(density.log_density_grad, theta0, cfg, rng)
        chains.append(result.draws)
        n_div += result.n_divergent
        acc.append(result.accept_rate)

    total_transitions = spec.chains * (spec.warmup + spec.iterations)
    if n_div > 0.001 * total_transitions:
        raise SamplingError(
            f"{n_div} divergent transitions out of {total_transitions} "
            f"(> 0.1%); mean acceptance {np.mean(acc):.2f}. The posterior may "
            "be too stiff for the adapted step size.")

    # map unconstrained draws to natural scale, feature-scale coefficients
    p = data.n_features
    nat_chains = []
    for draws in chains:
        params_nat = np.empty_like(draws)
        params_nat[:, 0] = draws[:, 0]
        params_nat[:, density._i_beta] = draws[:, density._i_beta]
        params_nat[:, density._i_tau] = np.exp(draws[:, density._i_tau])
        params_nat[:, density._i_phi] = np.exp(draws[:, density._i_phi])
        if density._i_gamma is not None:
            params_nat[:, density._i_gamma] = draws[:, density._i_gamma]
            params_nat[:, density._i_rho] = np.exp(draws[:, density._i_rho])
            if density.variant == "ESF":
                params_nat[:, density._i_extra] = 2.0 * expit(draws[:, density._i_extra])
            elif density.variant == "RE_ESF":
                params_nat[:, density._i_extra] = np.exp(draws[:, density._i_extra])
        nat_chains.append(params_nat)

    rhat_values = gelman_rubin(nat_chains)
    rhat = dict(zip(density.names, rhat_values))
    if spec.check_rhat:
        bad = {k: v for k, v in rhat.items() if v > spec.rhat_limit}
        if bad:
            worst = sorted(bad.items(), key=lambda kv: -kv[1])[:5]
            raise ConvergenceError(
                f"split R-hat above {spec.rhat_limit} for {len(bad)} parameter(s): "
                + ", ".join(f"{k}={v:.3f}" for k, v in worst))

    stacked = np.vstack(nat_chains)
    chain_ids = np.repeat(np.arange(spec.chains), spec.iterations)

    design_coef = stacked[:, density._i_beta]
    if data.qr is not None:
        feature_coef = data.qr.to_features(design_coef)
    else:
        feature_coef = design_coef

    # pointwise log likelihood, vectorized over draws
    eta = stacked[:, [0]] + design_coef @ data.design.T
    if density._i_gamma is not None:
        eta += stacked[:, density._i_gamma] @ data.basis.vectors.T
    mu = np.exp(eta)
    phi_draws = stacked[:, [density._i_phi]]
    loglik = nb2_logpmf(data.y[None, :], mu, phi_draws)

    out = stacked.copy()
    out[:, density._i_beta] = feature_coef
    names = list(density.names)
    for j, fname in enumerate(data.feature_names):
        names[1 + j] = f"beta[{fname}]"
    return PosteriorSamples(
        names=names, draws=out, chain_ids=chain_ids, seed=spec.seed,
        pointwise_loglik=loglik, design_coef=design_coef, rhat=rhat,
        n_divergent=n_div, accept_rate=float(np.mean(acc)),
    )


# --------------------------------------------------------------------------
# prediction

@dataclass
class Prediction:
    """Posterior predictive mean structure per unit."""

    mean: np.ndarray
    lower90: np.ndarray
    upper90: np.ndarray
    fixed: np.ndarray              # posterior mean exp(beta0 + X beta)
    random_multiplier: np.ndarray  # posterior mean exp(E gamma)
    mu_draws: np.ndarray           # S x N


def predict(samples: PosteriorSamples, x_new: np.ndarray,
            basis_vectors: np.ndarray | None = None,
            feature_names: list[str] | None = None,
            fit_feature_names: list[str] | None = None) -> Prediction:
    """Expected counts for new (already standardized) features.

    When both name lists are given, columns of ``x_new`` are matched to the
    fit's features by name and missing ones raise. Omitting
    ``basis_vectors`` gives a fixed-effects-only prediction (the transfer
    setting); gamma draws are then ignored.
    """
    x = np.asarray(x_new, dtype=float)
    if feature_names is not None and fit_feature_names is not None:
        if list(feature_names) != list(fit_feature_names):
            missing = [n for n in fit_feature_names if n not in feature_names]
            if missing:
                raise ValueError(f"missing feature column(s): {missing}")
            order = [feature_names.index(n) for n in fit_feature_names]
            x = x[:, order]
    beta0 = samples.column("beta0")
    beta = samples.matrix("beta")
    if beta.shape[1] != x.shape[1]:
        raise ValueError(f"feature count mismatch: fit has {beta.shape[1]}, "
                         f"got {x.shape[1]}")
    eta_fixed = beta0[:, None] + beta @ x.T
    fixed = np.exp(eta_fixed)
    gamma = samples.matrix("gamma")
    if basis_vectors is not None and gamma.shape[1]:
        rand = np.exp(gamma @ np.asarray(basis_vectors).T)
    else:
        rand = np.ones_like(fixed)
    mu = fixed * rand
    return Prediction(
        mean=mu.mean(axis=0),
        lower90=np.quantile(mu, 0.05, axis=0),
        upper90=np.quantile(mu, 0.95, axis=0),
        fixed=fixed.mean(axis=0),
        random_multiplier=rand.mean(axis=0),
        mu_draws=mu,
    )
