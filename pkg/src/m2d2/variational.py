"""Mean-field variational family and closed-form KL terms.

Feature parameters θ_h and the final-layer mean m get diagonal Gaussians
with std = softplus(ρ). The final-layer variance s gets a log-normal with
learnable log-scale location and fixed scale σ_s. θ_L is never stored: it is
drawn as m + √s ⊙ ε.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .errors import ConfigError, ContractError
from .fusionnet import HEAD, ParameterSet, init_parameters

INIT_STD = 0.05


def softplus_inv(y):
    return float(np.log(np.expm1(y)))


RHO_INIT = softplus_inv(INIT_STD)


@dataclass
class GaussianMeanField:
    """Diagonal Gaussian over named tensors; values may be arrays or graph tensors."""

    mu: dict
    rho: dict

    def __post_init__(self):
        if set(self.mu) != set(self.rho):
            raise ContractError(f"mu/rho names differ: {sorted(set(self.mu) ^ set(self.rho))}")
        for name in self.mu:
            if np.shape(dc.as_tensor(self.mu[name]).data) != np.shape(dc.as_tensor(self.rho[name]).data):
                raise ContractError(f"mu/rho shapes differ for {name}")

    def std(self):
        return {k: dc.softplus(v) for k, v in self.rho.items()}


@dataclass
class LogNormalVariational:
    loc: object
    scale: float = 0.1

    def __post_init__(self):
        if self.scale < 0:
            raise ConfigError("prior.sigma_s", "must be >= 0")


@dataclass(frozen=True)
class PriorSpec:
    theta_h_var: float = 0.1
    m_loc: float = 0.0
    m_prec: float = None
    s_tau: float = 0.01
    sigma_s: float = 0.1

    def __post_init__(self):
        if self.m_prec is None:
            object.__setattr__(self, "m_prec", 1.0 / self.theta_h_var if self.theta_h_var > 0 else -1.0)
        for name in ("theta_h_var", "m_prec", "s_tau"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"prior.{name}", "must be > 0")
        if self.sigma_s < 0:
            raise ConfigError("prior.sigma_s", "must be >= 0")


def sample_reparam(q, rng, noise=None):
    """θ = μ + softplus(ρ) ⊙ ε. Returns (samples, noise); pass ``noise`` back in to freeze ε."""
    if noise is None:
        noise = {k: rng.standard_normal(np.shape(dc.as_tensor(v).data)) for k, v in q.mu.items()}
    samples = {}
    for name, mu in q.mu.items():
        rho = q.rho[name]
        samples[name] = dc.add(mu, dc.mul(dc.softplus(rho), noise[name]))
    return samples, noise


def sample_lognormal(q, rng, noise=None):
    """s = exp(loc + σ_s ε); strictly positive. Returns (s, noise)."""
    loc = dc.as_tensor(q.loc)
    if noise is None:
        noise = rng.standard_normal(loc.shape)
    return dc.exp(dc.add(loc, q.scale * noise)), noise


def kl_gaussian_diag(q, prior_mean, prior_var):
    """Σ KL(N(μ_q, σ_q²) ‖ N(prior_mean, prior_var)) over every entry of ``q``."""
    if not prior_var > 0:
        raise ConfigError("prior variance", f"must be > 0, got {prior_var}")
    log_sp = 0.5 * math.log(prior_var)
    total = None
    for name, mu in q.mu.items():
        sq = dc.softplus(q.rho[name])
        term = (
            (log_sp - dc.log(sq))
            + (dc.square(sq) + dc.square(dc.sub(mu, prior_mean))) / (2.0 * prior_var)
            - 0.5
        )
        part = dc.sum_(term)
        total = part if total is None else total + part
    return total if total is not None else dc.Tensor(0.0)


def s_penalty(q, tau_s):
    """τ_s ‖loc‖²: the location-dependent part of the log-normal KL."""
    if not tau_s > 0:
        raise ConfigError("prior.s_tau", "must be > 0")
    return tau_s * dc.sum_(dc.square(q.loc))


@dataclass
class VariationalPosterior:
    """q(θ_h) q(m) [q(s)]. With ``s`` None the head Gaussian is q(θ_L) itself."""

    theta_h: GaussianMeanField
    head: GaussianMeanField
    s: LogNormalVariational = None

    def to_arrays(self):
        out = {}
        for name in self.theta_h.mu:
            out[f"mu_h/{name}"] = dc.as_tensor(self.theta_h.mu[name]).data
            out[f"rho_h/{name}"] = dc.as_tensor(self.theta_h.rho[name]).data
        out["mu_L"] = dc.as_tensor(self.head.mu[HEAD]).data
        out["rho_L"] = dc.as_tensor(self.head.rho[HEAD]).data
        if self.s is not None:
            out["s_loc"] = dc.as_tensor(self.s.loc).data
        return out

    @classmethod
    def from_arrays(cls, arrays, sigma_s=0.1):
        mu_h = {k[5:]: v for k, v in arrays.items() if k.startswith("mu_h/")}
        rho_h = {k[6:]: v for k, v in arrays.items() if k.startswith("rho_h/")}
        head = GaussianMeanField({HEAD: arrays["mu_L"]}, {HEAD: arrays["rho_L"]})
        s = LogNormalVariational(arrays["s_loc"], sigma_s) if "s_loc" in arrays else None
        return cls(GaussianMeanField(mu_h, rho_h), head, s)

    def mean_parameters(self):
        return ParameterSet(dict(self.theta_h.mu), self.head.mu[HEAD])


def init_posterior(config, rng, with_s=True, sigma_s=0.1):
    """Means from the deterministic initialiser; std 0.05 everywhere."""
    base = init_parameters(config, rng)
    rho_h = {k: np.full(np.shape(v), RHO_INIT) for k, v in base.theta_h.items()}
    head = GaussianMeanField({HEAD: base.theta_L}, {HEAD: np.full(base.theta_L.shape, RHO_INIT)})
    s = None
    if with_s:
        s = LogNormalVariational(np.full(base.theta_L.shape, 2.0 * math.log(INIT_STD)), sigma_s)
    return VariationalPosterior(GaussianMeanField(dict(base.theta_h), rho_h), head, s)


@dataclass
class PosteriorSample:
    params: ParameterSet
    m: object = None
    s: object = None


def sample_posterior(post, rng, noise=None):
    """Draw θ_h, m, s and θ_L = m + √s ⊙ ε. ``noise`` freezes every ε (dict in/out)."""
    noise = {} if noise is None else noise
    theta_h, noise["theta_h"] = sample_reparam(post.theta_h, rng, noise.get("theta_h"))
    head, noise["head"] = sample_reparam(post.head, rng, noise.get("head"))
    m = head[HEAD]
    if post.s is None:
        return PosteriorSample(ParameterSet(theta_h, m)), noise
    s, noise["s"] = sample_lognormal(post.s, rng, noise.get("s"))
    if "theta_L" not in noise:
        noise["theta_L"] = rng.standard_normal(m.shape)
    theta_L = m + dc.sqrt(s) * noise["theta_L"]
    return PosteriorSample(ParameterSet(theta_h, theta_L), m, s), noise
