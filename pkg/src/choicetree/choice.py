"""Multinomial logit with a node-varying constant on the gated alternative.

Inside a model tree the gated alternative's constant in node ``i`` is
``asc_gated + exp(log_sigma) * eta[i]`` (non-centred partial pooling).
Nodes flagged as not considering the gated alternative drop it from the
choice set.  Without a tree the model is a plain MNL and the parameter
vector stops after ``asc_gated``.

Parameter vector layout: ``[beta..., asc_gated, log_sigma, eta...]``.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.linalg import LinAlgError, cho_factor
from scipy.optimize import minimize
from scipy.special import logsumexp
from scipy.stats import multivariate_t

from .data import ChoiceDataset, FeatureSchema, SchemaError

LOG_2PI = math.log(2 * math.pi)


class EstimationError(RuntimeError):
    pass


@dataclass(frozen=True)
class Term:
    """``coef * column`` in ``alt``'s utility; ``column=None`` makes a constant."""

    alt: str
    coef: str
    column: str | None = None


@dataclass(frozen=True)
class UtilitySpec:
    terms: tuple[Term, ...]
    gated: str

    def __post_init__(self):
        object.__setattr__(self, "terms", tuple(Term(*t) if not isinstance(t, Term) else t for t in self.terms))
        consts = [t for t in self.terms if t.column is None]
        gated_consts = [t for t in consts if t.alt == self.gated]
        if len(gated_consts) != 1:
            raise SchemaError(f"the gated alternative {self.gated!r} needs exactly one constant term")
        names = [t.coef for t in consts]
        if len(set(names)) != len(names):
            raise SchemaError("constant names must be unique")
        if set(names) & {t.coef for t in self.terms if t.column is not None}:
            raise SchemaError("a coefficient cannot be both a constant and a slope")
        if len({t.alt for t in consts}) != len(consts):
            raise SchemaError("at most one constant per alternative")

    @property
    def gated_constant(self) -> str:
        return next(t.coef for t in self.terms if t.column is None and t.alt == self.gated)

    @property
    def beta_names(self) -> tuple[str, ...]:
        out: list[str] = []
        for t in self.terms:
            if t.coef != self.gated_constant and t.coef not in out:
                out.append(t.coef)
        return tuple(out)

    @property
    def columns(self) -> tuple[str, ...]:
        return tuple(dict.fromkeys(t.column for t in self.terms if t.column is not None))

    def validate(self, schema: FeatureSchema) -> None:
        names = schema.alt_names
        if self.gated not in names:
            raise SchemaError(f"unknown gated alternative {self.gated!r}")
        for t in self.terms:
            if t.alt not in names:
                raise SchemaError(f"utility term refers to unknown alternative {t.alt!r}")
            if t.column is not None and not schema.column(t.column).is_utility_covariate:
                raise SchemaError(f"column {t.column!r} is not declared as a utility covariate")
        with_const = {t.alt for t in self.terms if t.column is None}
        if all(a in with_const for a in names):
            raise SchemaError("one alternative must be left without a constant (reference)")

    def with_gated_terms(self, columns: Sequence[str], prefix: str = "b") -> "UtilitySpec":
        """Copy with extra slopes on the gated alternative (the plain-MNL comparison model)."""
        extra = tuple(Term(self.gated, f"{prefix}_{c}_{self.gated}", c) for c in columns)
        return UtilitySpec(self.terms + extra, self.gated)


@dataclass(frozen=True)
class PriorSpec:
    """Normal(0, variance) on slopes and constants; standard normal on each eta.

    The group variance sigma^2 is log-normal with location 0 and scale
    ``log_var_scale``, so ``log_sigma`` is normal with sd ``log_var_scale / 2``.
    """

    variance: float = 4.0
    log_var_scale: float = 2.0

    def __post_init__(self):
        if not (self.variance > 0 and self.log_var_scale > 0):
            raise ValueError("prior scales must be positive")

    @property
    def log_sigma_sd(self) -> float:
        return self.log_var_scale / 2.0


@dataclass(frozen=True, eq=False)
class Design:
    X: np.ndarray              # (n_obs, n_alts, n_beta)
    available: np.ndarray      # (n_obs, n_alts), after winnowing
    chosen: np.ndarray
    gated: int
    eta_index: np.ndarray      # eta slot per observation, -1 if none
    n_eta: int
    hierarchical: bool
    names: tuple[str, ...]
    eta_nodes: tuple[int, ...] = ()

    @property
    def n_obs(self) -> int:
        return self.X.shape[0]

    @property
    def n_beta(self) -> int:
        return self.X.shape[2]

    @property
    def n_params(self) -> int:
        return len(self.names)

    def feasible(self) -> bool:
        """False when some observation chose an alternative the model removes."""
        return bool(self.available[np.arange(self.n_obs), self.chosen].all())


def build_design(
    dataset: ChoiceDataset,
    spec: UtilitySpec,
    nodes: np.ndarray | None = None,
    consider: Sequence[bool] | None = None,
) -> Design:
    """Compile utilities for ``dataset``.  ``nodes`` (one per row) switches on the hierarchy."""
    schema = dataset.schema
    spec.validate(schema)
    n, J = dataset.n_obs, dataset.n_alts
    beta = spec.beta_names
    X = np.zeros((n, J, len(beta)))
    avail = dataset.available.copy()
    for t in spec.terms:
        if t.coef == spec.gated_constant:
            continue
        j = schema.alt_index(t.alt)
        k = beta.index(t.coef)
        if t.column is None:
            X[:, j, k] += 1.0
            continue
        v = dataset.column(t.column)
        v = v if v.ndim == 1 else v[:, j]
        bad = np.isnan(v) & avail[:, j]
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise SchemaError(f"unresolved attribute {t.column!r} for {t.alt!r} at obs_id={dataset.obs_ids[i]}")
        X[:, j, k] += np.where(avail[:, j], v, 0.0)
    g = schema.alt_index(spec.gated)
    names = list(beta) + [spec.gated_constant]
    if nodes is None:
        return Design(X, avail, dataset.chosen.copy(), g, np.full(n, -1), 0, False, tuple(names))
    nodes = np.asarray(nodes, dtype=np.int64)
    n_nodes = int(nodes.max()) + 1 if nodes.size else 1
    if consider is None:
        consider = [True] * n_nodes
    consider = np.asarray(consider, dtype=bool)
    if nodes.size and nodes.max() >= len(consider):
        raise ValueError("node index outside the consider flags")
    eta_nodes = tuple(int(i) for i in np.flatnonzero(consider))
    slot = np.full(len(consider), -1)
    slot[list(eta_nodes)] = np.arange(len(eta_nodes))
    eta_index = slot[nodes] if nodes.size else np.zeros(0, dtype=np.int64)
    avail[:, g] &= consider[nodes] if nodes.size else avail[:, g]
    names += [f"log_sigma_{spec.gated}"] + [f"eta[node {i}]" for i in eta_nodes]
    return Design(X, avail, dataset.chosen.copy(), g, eta_index, len(eta_nodes), True, tuple(names), eta_nodes)


@dataclass(frozen=True, eq=False)
class ChoiceParams:
    beta: np.ndarray
    asc_gated: float
    log_sigma: float | None = None
    eta: np.ndarray = np.zeros(0)

    def vector(self) -> np.ndarray:
        parts = [np.asarray(self.beta, dtype=float), [self.asc_gated]]
        if self.log_sigma is not None:
            parts += [[self.log_sigma], np.asarray(self.eta, dtype=float)]
        return np.concatenate(parts)

    @classmethod
    def from_vector(cls, theta, design: Design) -> "ChoiceParams":
        theta = np.asarray(theta, dtype=float)
        K = design.n_beta
        if design.hierarchical:
            return cls(theta[:K].copy(), float(theta[K]), float(theta[K + 1]), theta[K + 2:].copy())
        return cls(theta[:K].copy(), float(theta[K]))

    @property
    def sigma(self) -> float | None:
        return None if self.log_sigma is None else math.exp(self.log_sigma)

    def node_constants(self) -> np.ndarray:
        """Gated constant of each considered node."""
        if self.log_sigma is None:
            return np.array([self.asc_gated])
        return self.asc_gated + math.exp(self.log_sigma) * np.asarray(self.eta)


def _vec(params) -> np.ndarray:
    if isinstance(params, ChoiceParams):
        return params.vector()
    return np.asarray(params, dtype=float)


def _gated_constant(theta: np.ndarray, design: Design) -> np.ndarray:
    K = design.n_beta
    c = np.full(design.n_obs, theta[K])
    if design.hierarchical and design.n_eta:
        sigma = math.exp(theta[K + 1])
        eta = theta[K + 2:]
        has = design.eta_index >= 0
        c[has] += sigma * eta[design.eta_index[has]]
    return c


def utilities(params, design: Design) -> np.ndarray:
    """Systematic utilities; -inf for unavailable or winnowed alternatives."""
    theta = _vec(params)
    if len(theta) != design.n_params:
        raise ValueError(f"expected {design.n_params} parameters, got {len(theta)}")
    V = design.X @ theta[: design.n_beta]
    V[:, design.gated] += _gated_constant(theta, design)
    V[~design.available] = -np.inf
    return V


def softmax_available(V: np.ndarray, available: np.ndarray | None = None) -> np.ndarray:
    """Row-wise softmax over available entries with max subtraction; unavailable -> 0."""
    V = np.asarray(V, dtype=float)
    if available is None:
        available = np.isfinite(V) | (V > 0)
    V = np.where(available, V, -np.inf)
    m = V.max(axis=-1, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    E = np.exp(V - m)
    return E / E.sum(axis=-1, keepdims=True)


def choice_prob(params, design: Design) -> np.ndarray:
    return softmax_available(utilities(params, design), design.available)


def log_likelihood(params, design: Design) -> float:
    """Sum of log probabilities of the chosen alternatives; -inf if any is impossible."""
    if design.n_obs == 0:
        return 0.0
    if not design.feasible():
        return -math.inf
    V = utilities(params, design)
    rows = np.arange(design.n_obs)
    return float(V[rows, design.chosen].sum() - logsumexp(V, axis=1).sum())


def log_prior_density(params, design: Design, prior: PriorSpec = PriorSpec()) -> float:
    theta = _vec(params)
    K = design.n_beta
    v = prior.variance
    head = theta[: K + 1]
    lp = -0.5 * (head.size * (LOG_2PI + math.log(v)) + head @ head / v)
    if design.hierarchical:
        s = prior.log_sigma_sd
        u = theta[K + 1]
        eta = theta[K + 2:]
        lp += -0.5 * (LOG_2PI + 2 * math.log(s) + (u / s) ** 2)
        lp += -0.5 * (eta.size * LOG_2PI + eta @ eta)
    return float(lp)


def log_posterior(params, design: Design, prior: PriorSpec = PriorSpec()) -> float:
    """Unnormalised log posterior: log likelihood plus normalised log prior density."""
    ll = log_likelihood(params, design)
    if ll == -math.inf:
        return ll
    return ll + log_prior_density(params, design, prior)


def grad_log_posterior(params, design: Design, prior: PriorSpec = PriorSpec()) -> np.ndarray:
    theta = _vec(params)
    if not design.feasible():
        raise EstimationError("gradient undefined: the likelihood is zero (a chosen alternative is winnowed)")
    K = design.n_beta
    grad = np.zeros_like(theta)
    if design.n_obs:
        P = choice_prob(theta, design)
        R = -P
        R[np.arange(design.n_obs), design.chosen] += 1.0
        grad[:K] = np.einsum("nj,njk->k", R, design.X)
        r = R[:, design.gated]
        grad[K] = r.sum()
        if design.hierarchical and design.n_eta:
            sigma = math.exp(theta[K + 1])
            eta = theta[K + 2:]
            has = design.eta_index >= 0
            per_slot = np.bincount(design.eta_index[has], weights=r[has], minlength=design.n_eta)
            grad[K + 2:] = sigma * per_slot
            grad[K + 1] = sigma * per_slot @ eta
    grad[: K + 1] -= theta[: K + 1] / prior.variance
    if design.hierarchical:
        grad[K + 1] -= theta[K + 1] / prior.log_sigma_sd ** 2
        grad[K + 2:] -= theta[K + 2:]
    return grad


def _fd_neg_hessian(grad, x: np.ndarray, rel_step: float = 1e-5) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    D = x.size
    H = np.empty((D, D))
    for i in range(D):
        h = rel_step * max(1.0, abs(x[i]))
        e = np.zeros(D)
        e[i] = h
        H[:, i] = -(grad(x + e) - grad(x - e)) / (2 * h)
    return 0.5 * (H + H.T)


def neg_hessian(theta, design: Design, prior: PriorSpec = PriorSpec(), rel_step: float = 1e-5) -> np.ndarray:
    """Negative Hessian of the log posterior by central differences of the analytic gradient."""
    return _fd_neg_hessian(lambda x: grad_log_posterior(x, design, prior), theta, rel_step)


def log_lik_draws(thetas: np.ndarray, design: Design, max_cells: int = 4_000_000) -> np.ndarray:
    """Log likelihood for many parameter vectors at once."""
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    S = thetas.shape[0]
    if design.n_obs == 0:
        return np.zeros(S)
    if not design.feasible():
        return np.full(S, -np.inf)
    K = design.n_beta
    out = np.empty(S)
    step = max(1, max_cells // max(1, design.n_obs * design.X.shape[1]))
    rows = np.arange(design.n_obs)
    for a in range(0, S, step):
        T = thetas[a: a + step]
        V = np.tensordot(T[:, :K], design.X, axes=([1], [2]))
        const = np.repeat(T[:, K:K + 1], design.n_obs, axis=1)
        if design.hierarchical and design.n_eta:
            has = design.eta_index >= 0
            sigma = np.exp(T[:, K + 1])[:, None]
            const[:, has] += sigma * T[:, K + 2:][:, design.eta_index[has]]
        V[:, :, design.gated] += const
        V[:, ~design.available] = -np.inf
        out[a: a + step] = V[:, rows, design.chosen].sum(axis=1) - logsumexp(V, axis=2).sum(axis=1)
    return out


def log_joint_draws(thetas: np.ndarray, design: Design, prior: PriorSpec = PriorSpec(),
                    max_cells: int = 4_000_000) -> np.ndarray:
    """Log posterior (unnormalised) for many parameter vectors at once."""
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    lp = np.array([log_prior_density(t, design, prior) for t in thetas])
    return log_lik_draws(thetas, design, max_cells) + lp


# ---------------------------------------------------------------------------
# Estimation


@dataclass(frozen=True, eq=False)
class MapEstimate:
    theta: np.ndarray
    log_posterior: float
    grad_norm: float
    converged: bool
    n_converged: int
    names: tuple[str, ...]

    def params(self, design: Design) -> ChoiceParams:
        return ChoiceParams.from_vector(self.theta, design)


def _polish(x, logf, grad, max_iter=20):
    """Newton steps with backtracking; drives the gradient to round-off."""
    f = logf(x)
    for _ in range(max_iter):
        g = grad(x)
        if np.linalg.norm(g) < 1e-10:
            break
        try:
            step = np.linalg.solve(_fd_neg_hessian(grad, x), g)
        except np.linalg.LinAlgError:
            break
        t = 1.0
        for _ in range(30):
            x_new = x + t * step
            f_new = logf(x_new)
            if f_new >= f - 1e-12 * abs(f):
                break
            t *= 0.5
        else:
            break
        done = np.linalg.norm(x_new - x) < 1e-14 * (1 + np.linalg.norm(x))
        x, f = x_new, f_new
        if done:
            break
    return x, f


def _maximize(logf, grad, x0):
    def obj(x):
        return -logf(x), -grad(x)

    with np.errstate(over="ignore"):
        res = minimize(obj, x0, jac=True, method="BFGS", options={"gtol": 1e-8, "maxiter": 5000})
    return _polish(res.x, logf, grad)


def map_estimate(
    design: Design,
    prior: PriorSpec = PriorSpec(),
    starts: int = 4,
    seed: int = 0,
    jitter: float = 0.5,
    tol: float = 1e-5,
) -> MapEstimate:
    """Maximise the log posterior by BFGS from several jittered starts, then Newton-polish."""
    if starts < 1:
        raise ValueError("starts must be at least 1")
    if not design.feasible():
        raise EstimationError("the likelihood is zero for every parameter value (a chosen alternative is winnowed)")
    rng = np.random.default_rng(seed)
    D = design.n_params

    def logf(x):
        return log_posterior(x, design, prior)

    def grad(x):
        return grad_log_posterior(x, design, prior)

    best = None
    n_ok = 0
    diagnostics = []
    for s in range(starts):
        x0 = np.zeros(D) if s == 0 else rng.normal(0.0, jitter, D)
        x, val = _maximize(logf, grad, x0)
        if not np.isfinite(val):
            diagnostics.append(f"start {s}: non-finite objective")
            continue
        gn = float(np.linalg.norm(grad_log_posterior(x, design, prior)))
        ok = gn < tol
        n_ok += ok
        diagnostics.append(f"start {s}: log_post={val:.6f} |grad|={gn:.2e}")
        if best is None or (ok, val) > (best[2], best[1]):
            best = (x, val, ok, gn)
    if best is None or not best[2]:
        raise EstimationError("no start converged:\n  " + "\n  ".join(diagnostics))
    x, val, ok, gn = best
    return MapEstimate(x, val, gn, ok, n_ok, design.names)


@dataclass(frozen=True, eq=False)
class EvidenceEstimate:
    """Log marginal likelihood with importance-weighted posterior draws."""

    log_evidence: float
    mc_standard_error: float
    draws: np.ndarray
    weights: np.ndarray
    ess: float
    names: tuple[str, ...]
    map_theta: np.ndarray
    df: float = 5.0
    scale: float = 1.0
    hessian_regularized: bool = False

    @property
    def n_draws(self) -> int:
        return self.draws.shape[0]

    def posterior_mean(self) -> np.ndarray:
        return self.weights @ self.draws

    def to_dict(self) -> dict:
        return {
            "log_evidence": _jfloat(self.log_evidence),
            "mc_standard_error": _jfloat(self.mc_standard_error),
            "ess": _jfloat(self.ess),
            "df": self.df,
            "scale": self.scale,
            "hessian_regularized": self.hessian_regularized,
            "names": list(self.names),
            "map": [_jfloat(x) for x in self.map_theta],
            "weights": [float(x) for x in self.weights],
            "draws": [[float(x) for x in row] for row in self.draws],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvidenceEstimate":
        names = tuple(d["names"])
        draws = np.array(d["draws"], dtype=float).reshape(-1, len(names))
        return cls(
            _pfloat(d["log_evidence"]),
            _pfloat(d["mc_standard_error"]),
            draws,
            np.array(d["weights"], dtype=float),
            _pfloat(d["ess"]),
            names,
            np.array([float(x) for x in d["map"]], dtype=float),
            d["df"],
            d["scale"],
            d["hessian_regularized"],
        )


def _jfloat(x: float):
    x = float(x)
    return x if math.isfinite(x) else str(x)


def _pfloat(x) -> float:
    return float(x)


def impossible_evidence(design: Design) -> EvidenceEstimate:
    """Evidence of a model that assigns zero probability to the observed choices."""
    return EvidenceEstimate(-math.inf, 0.0, np.zeros((0, design.n_params)), np.zeros(0), 0.0,
                            design.names, np.full(design.n_params, np.nan))


def _proposal_scale(H: np.ndarray) -> tuple[np.ndarray, bool]:
    try:
        cho_factor(H)
        return np.linalg.inv(H), False
    except LinAlgError:
        pass
    H2 = H + 1e-6 * np.eye(len(H))
    try:
        cho_factor(H2)
    except LinAlgError:
        raise EstimationError("the negative Hessian at the MAP is not positive definite, even after regularisation") from None
    warnings.warn("negative Hessian at the MAP regularised with 1e-6 * I", stacklevel=3)
    return np.linalg.inv(H2), True


class _Collapsed:
    """Proposal coordinates for the hierarchical model: ``[beta, log_sigma, c]``.

    ``c_i = asc + sigma * eta_i`` are the node constants.  The likelihood
    depends on ``asc`` only through ``c``, and given ``(c, sigma)`` the
    group mean ``asc`` is conjugate normal, so it is integrated out
    analytically: ``c ~ N(0, sigma^2 I + v 11')``.  The importance proposal
    then only covers coordinates the data inform directly, avoiding the
    ``(asc, log_sigma, eta)`` funnel; ``asc`` is drawn from its exact
    conditional, which leaves the weights untouched.  Without a hierarchy
    the coordinates are the parameters themselves.
    """

    def __init__(self, design: Design, prior: PriorSpec):
        self.design, self.prior = design, prior
        self.K = design.n_beta
        self.on = design.hierarchical
        self.m = design.n_eta if self.on else 0

    # psi = [beta (K), log_sigma, c (m)]; theta = [beta (K), asc, log_sigma, eta (m)]

    def from_theta(self, theta: np.ndarray) -> np.ndarray:
        th = np.array(theta, dtype=float, ndmin=2)
        if not self.on:
            return th
        K = self.K
        c = th[:, K:K + 1] + np.exp(th[:, K + 1:K + 2]) * th[:, K + 2:]
        return np.hstack([th[:, :K], th[:, K + 1:K + 2], c])

    def asc_conditional(self, psi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Mean and sd of ``asc`` given ``(log_sigma, c)``, one per row."""
        K, v = self.K, self.prior.variance
        inv_s2 = np.exp(-2 * psi[:, K])
        prec = 1.0 / v + self.m * inv_s2
        return psi[:, K + 1:].sum(axis=1) * inv_s2 / prec, 1.0 / np.sqrt(prec)

    def to_theta(self, psi: np.ndarray, z: np.ndarray | None = None) -> np.ndarray:
        """Parameters from proposal coordinates; ``z`` are standard normals for ``asc`` (0 gives its mean)."""
        psi = np.array(psi, dtype=float, ndmin=2)
        if not self.on:
            return psi
        K = self.K
        mean, sd = self.asc_conditional(psi)
        asc = mean + sd * (0.0 if z is None else z)
        eta = (psi[:, K + 1:] - asc[:, None]) / np.exp(psi[:, K:K + 1])
        return np.hstack([psi[:, :K], asc[:, None], psi[:, K:K + 1], eta])

    def _lik_theta(self, psi: np.ndarray) -> np.ndarray:
        """A parameter vector with the same utilities as ``psi`` (asc 0, eta = c / sigma)."""
        psi = np.array(psi, dtype=float, ndmin=2)
        K = self.K
        return np.hstack([psi[:, :K], np.zeros((len(psi), 1)), psi[:, K:K + 1],
                          psi[:, K + 1:] / np.exp(psi[:, K:K + 1])])

    def _log_prior(self, psi: np.ndarray) -> np.ndarray:
        K, m, v = self.K, self.m, self.prior.variance
        s = self.prior.log_sigma_sd
        beta, ls, c = psi[:, :K], psi[:, K], psi[:, K + 1:]
        out = -0.5 * (K * (LOG_2PI + math.log(v)) + (beta ** 2).sum(axis=1) / v)
        out += -0.5 * (LOG_2PI + 2 * math.log(s) + (ls / s) ** 2)
        if m:
            with np.errstate(over="ignore", invalid="ignore"):
                inv = np.exp(-2 * ls)                     # 1 / sigma^2
                r = inv / (1.0 + m * v * inv)
                S = c.sum(axis=1)
                quad = inv * (c ** 2).sum(axis=1) - v * r * inv * S ** 2
                val = -0.5 * (m * LOG_2PI + 2 * m * ls + np.log1p(m * v * inv) + quad)
            out += np.where(np.isfinite(val), val, -np.inf)
        return out

    def log_density_theta(self, q, thetas: np.ndarray) -> np.ndarray:
        """Density in parameter space of ``to_theta(psi, z)`` with ``psi ~ q`` and ``z ~ N(0, 1)``."""
        psis = self.from_theta(thetas)
        K = self.K
        mean, sd = self.asc_conditional(psis)
        z = (thetas[:, K] - mean) / sd
        # Jacobian of (beta, asc, log_sigma, eta) -> (beta, log_sigma, c, asc) is sigma^m
        return (np.atleast_1d(q.logpdf(psis)) - 0.5 * (LOG_2PI + z ** 2) - np.log(sd)
                + self.m * thetas[:, K + 1])

    def logf(self, psi) -> float:
        if not self.on:
            return log_posterior(psi, self.design, self.prior)
        psi = np.asarray(psi, dtype=float)
        return log_likelihood(self._lik_theta(psi)[0], self.design) + float(self._log_prior(psi[None])[0])

    def grad(self, psi) -> np.ndarray:
        if not self.on:
            return grad_log_posterior(psi, self.design, self.prior)
        psi = np.asarray(psi, dtype=float)
        K, m, v = self.K, self.m, self.prior.variance
        theta = self._lik_theta(psi)[0]
        g = grad_log_posterior(theta, self.design, self.prior)
        sigma = math.exp(psi[K])
        out = np.empty_like(psi)
        # likelihood parts: undo the prior terms grad_log_posterior added in theta coordinates
        out[:K] = g[:K] + theta[:K] / v - psi[:K] / v
        out[K + 1:] = (g[K + 2:] + theta[K + 2:]) / sigma
        out[K] = -psi[K] / self.prior.log_sigma_sd ** 2
        if m:
            c = psi[K + 1:]
            s2 = sigma ** 2
            A = 1.0 + m * v / s2
            Sc = (c - v * c.sum() / (s2 * A)) / s2          # Sigma^-1 c
            tr = (m - m * v / (s2 * A)) / s2                  # trace Sigma^-1
            out[K + 1:] -= Sc
            out[K] += s2 * (Sc @ Sc - tr)
        return out

    def log_joint(self, psis: np.ndarray) -> np.ndarray:
        if not self.on:
            return log_joint_draws(psis, self.design, self.prior)
        psis = np.atleast_2d(psis)
        return log_lik_draws(self._lik_theta(psis), self.design) + self._log_prior(psis)


def _prior_evidence(design: Design, prior: PriorSpec, n_draws: int, seed: int) -> EvidenceEstimate:
    """No observations: the evidence is the prior's total mass, 1, and the draws come from the prior."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    sd = np.full(design.n_params, math.sqrt(prior.variance))
    if design.hierarchical:
        sd[design.n_beta + 1] = prior.log_sigma_sd
        sd[design.n_beta + 2:] = 1.0
    draws = rng.standard_normal((n_draws, design.n_params)) * sd
    return EvidenceEstimate(0.0, 0.0, draws, np.full(n_draws, 1.0 / n_draws), float(n_draws), design.names,
                            np.zeros(design.n_params))


def estimate_evidence(
    design: Design,
    prior: PriorSpec = PriorSpec(),
    n_draws: int = 2000,
    df: float = 5.0,
    seed: int = 0,
    min_ess: float | None = None,
    map_est: MapEstimate | None = None,
    starts: int = 4,
) -> EvidenceEstimate:
    """Importance sampling from a Student-t fitted at the posterior mode.

    The proposal is located at the mode and scaled by the inverse negative
    Hessian.  With node constants it is an equal mixture of two such
    proposals, one in the model parameters and one in the coordinates of
    :class:`_Collapsed`; the first suits tightly pooled nodes and the
    second widely spread ones.  Each draw is weighted against the mixture
    density.  The mean of the unnormalised weights estimates
    the evidence and the self-normalised weights turn the draws into
    posterior draws.  If the effective sample size falls below ``min_ess``
    the proposal is widened once (heavier tails, 1.5x scale) before giving up.
    """
    if not design.feasible():
        return impossible_evidence(design)
    if min_ess is None:
        min_ess = max(10.0, 0.01 * n_draws)
    if design.n_obs == 0:
        return _prior_evidence(design, prior, n_draws, seed)
    if map_est is None:
        map_est = map_estimate(design, prior, starts=starts, seed=seed)
    cc = _Collapsed(design, prior)
    # (location, inverse negative Hessian, coordinate map or None)
    comps = []
    mu = np.asarray(map_est.theta, dtype=float)
    comps.append((mu, *_proposal_scale(neg_hessian(mu, design, prior)), None))
    if cc.on:
        psi, _ = _maximize(cc.logf, cc.grad, cc.from_theta(mu)[0])
        comps.append((psi, *_proposal_scale(_fd_neg_hessian(cc.grad, psi)), cc))
    regularized = any(c[2] for c in comps)
    counts = [n_draws // len(comps)] * len(comps)
    counts[-1] += n_draws - sum(counts)
    log_mix = np.log(np.array(counts) / n_draws)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    for attempt, (nu, scale) in enumerate([(df, 1.0), (max(2.5, df / 2), 1.5)]):
        qs = [multivariate_t(loc=loc, shape=cov * scale ** 2, df=nu, seed=rng) for loc, cov, _, _ in comps]
        blocks = []
        for q, n_c, (_, _, _, coords) in zip(qs, counts, comps):
            draws = np.asarray(q.rvs(size=n_c)).reshape(n_c, -1) if n_c else np.zeros((0, len(q.loc)))
            if coords is not None:
                draws = coords.to_theta(draws, rng.standard_normal(n_c))
            blocks.append(draws)
        thetas = np.vstack(blocks)
        # deterministic mixture: every draw is weighted against the full mixture density
        log_q = np.full((len(comps), n_draws), -np.inf)
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            for i, (q, (_, _, _, coords)) in enumerate(zip(qs, comps)):
                lq = np.atleast_1d(q.logpdf(thetas)) if coords is None else coords.log_density_theta(q, thetas)
                log_q[i] = np.where(np.isnan(lq), -np.inf, lq) + log_mix[i]
            log_w = log_joint_draws(thetas, design, prior) - logsumexp(log_q, axis=0)
        log_w = np.where(np.isnan(log_w), -np.inf, log_w)
        top = log_w.max()
        w = np.exp(log_w - top)
        mean_w = w.mean()
        log_z = top + math.log(mean_w)
        # delta method: sd(log mean w) ~= sd(w) / (sqrt(n) mean w)
        se = float(w.std(ddof=1) / (math.sqrt(n_draws) * mean_w)) if n_draws > 1 else math.inf
        weights = w / w.sum()
        ess = float(1.0 / np.sum(weights ** 2))
        if ess >= min_ess:
            return EvidenceEstimate(log_z, se, thetas, weights, ess, design.names,
                                    map_est.theta, nu, scale, regularized)
        if attempt == 0:
            warnings.warn(f"importance sampling ESS {ess:.1f} < {min_ess:.1f}; widening the proposal", stacklevel=2)
    raise EstimationError(f"importance sampling ESS {ess:.1f} stayed below {min_ess:.1f}")


def prob_batches(thetas: np.ndarray, design: Design, max_cells: int = 2_000_000):
    """Yield ``(start, P)`` with ``P`` of shape (s, n_obs, n_alts) for consecutive draw blocks."""
    thetas = np.atleast_2d(np.asarray(thetas, dtype=float))
    K = design.n_beta
    step = max(1, max_cells // max(1, design.n_obs * design.X.shape[1]))
    for a in range(0, thetas.shape[0], step):
        T = thetas[a: a + step]
        V = np.tensordot(T[:, :K], design.X, axes=([1], [2]))
        const = np.repeat(T[:, K:K + 1], design.n_obs, axis=1)
        if design.hierarchical and design.n_eta:
            has = design.eta_index >= 0
            const[:, has] += np.exp(T[:, K + 1])[:, None] * T[:, K + 2:][:, design.eta_index[has]]
        V[:, :, design.gated] += const
        yield a, softmax_available(V, np.broadcast_to(design.available, V.shape))


def mean_choice_prob(thetas: np.ndarray, weights: np.ndarray, design: Design) -> np.ndarray:
    """Posterior-mean choice probabilities, sum_s w_s P(y | x, theta_s)."""
    weights = np.asarray(weights, dtype=float)
    out = np.zeros((design.n_obs, design.X.shape[1]))
    for a, P in prob_batches(thetas, design):
        out += np.einsum("s,snj->nj", weights[a: a + P.shape[0]], P)
    return out


def share_draws(thetas: np.ndarray, design: Design) -> np.ndarray:
    """Mode shares (mean probability over observations) for each draw: (n_draws, n_alts)."""
    thetas = np.atleast_2d(thetas)
    out = np.empty((thetas.shape[0], design.X.shape[1]))
    for a, P in prob_batches(thetas, design):
        out[a: a + P.shape[0]] = P.mean(axis=1)
    return out
