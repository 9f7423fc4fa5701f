"""Diagonal-Gaussian products of experts and the episode scoring objective.

Every normaliser is kept in log space. For factors N(mu_i, 1/tau_i) on one
dimension the product is S * N(mu, 1/tau) with

    tau   = sum_i tau_i
    mu    = sum_i tau_i mu_i / tau
    log S = (1 - n)/2 log(2 pi) + 1/2 sum_i log tau_i - 1/2 log tau
            - 1/2 sum_i tau_i (mu_i - mu)^2

The last term is the stable form of 1/2 tau mu^2 - 1/2 sum_i tau_i mu_i^2.

A query is scored against support item m by log(lambda / lambda'), where
lambda integrates the query factor against the product of the item's views
and lambda' integrates the prior against the same product. Both share the
support normaliser, so the score is log S* - log S' with S* (S') the
normaliser of the query (prior) times the *normalised* view product. In
``neglect`` mode the prior is treated as a flat unit density and log S' = 0.
The p(x*) factor is constant across items and is never represented.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .autodiff import Graph, Node

LOG_2PI = float(np.log(2.0 * np.pi))
PRECISION_MIN = 1e-6
PRECISION_MAX = 1e6


@dataclass(frozen=True)
class DiagGaussian:
    """Per-dimension mean and precision (inverse variance)."""

    mean: np.ndarray
    precision: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=np.float64))
        precision = np.atleast_1d(np.asarray(self.precision, dtype=np.float64))
        if mean.shape != precision.shape or mean.ndim != 1:
            raise ValueError(f"mean {mean.shape} and precision {precision.shape} must be equal 1-D shapes")
        if not np.all(np.isfinite(mean)):
            raise ValueError("mean must be finite")
        if not np.all((precision > 0) & np.isfinite(precision)):
            raise ValueError("precision must be positive and finite")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "precision", precision)

    @classmethod
    def clamped(cls, mean, precision) -> "DiagGaussian":
        return cls(mean, np.clip(precision, PRECISION_MIN, PRECISION_MAX))

    @property
    def dim(self) -> int:
        return self.mean.shape[0]


@dataclass(frozen=True)
class FusedRepresentation:
    """Normalised product of factors plus its per-dimension log normaliser.

    ``evidence`` is the product of the view factors alone; it equals
    ``product`` unless a Gaussian prior was folded in, in which case
    ``prior_log_norm`` holds log S' (prior against normalised evidence).
    """

    product: DiagGaussian
    log_norm_per_dim: np.ndarray
    evidence: DiagGaussian | None = None
    prior_log_norm: np.ndarray | None = None

    def __post_init__(self):
        if self.evidence is None:
            object.__setattr__(self, "evidence", self.product)
        if self.prior_log_norm is None:
            object.__setattr__(self, "prior_log_norm", np.zeros(self.product.dim))

    @property
    def log_norm(self) -> float:
        return float(np.sum(self.log_norm_per_dim))


@dataclass(frozen=True)
class PriorSpec:
    mode: str = "neglect"
    mean: np.ndarray | None = None
    precision: np.ndarray | float | None = None

    def __post_init__(self):
        if self.mode not in ("neglect", "gaussian"):
            raise ValueError(f"unknown prior mode {self.mode!r}")
        if self.mode == "gaussian" and self.precision is not None and np.any(np.asarray(self.precision) <= 0):
            raise ValueError("prior precision must be positive")

    def factor(self, dim: int) -> DiagGaussian:
        mean = np.zeros(dim) if self.mean is None else np.broadcast_to(self.mean, (dim,))
        prec = 1e-3 if self.precision is None else self.precision
        return DiagGaussian(mean, np.broadcast_to(np.asarray(prec, dtype=np.float64), (dim,)))


NEGLECT = PriorSpec("neglect")


@dataclass
class ScoreMatrix:
    """values[n, m] = log score of query n against support item m."""

    values: np.ndarray
    targets: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.int64)
        if self.values.ndim != 2:
            raise ValueError("score values must be an N x M matrix")
        if self.targets.size and (self.targets.shape != (self.values.shape[0],)
                                  or self.targets.min() < 0 or self.targets.max() >= self.values.shape[1]):
            raise ValueError("targets must hold one index in [0, M) per query")

    def predictions(self) -> np.ndarray:
        return np.argmax(self.values, axis=1)

    def probabilities(self) -> np.ndarray:
        shifted = self.values - self.values.max(axis=1, keepdims=True)
        p = np.exp(shifted)
        return p / p.sum(axis=1, keepdims=True)


def _log_norm_terms(means: np.ndarray, precisions: np.ndarray):
    """Product precision, mean and log S for stacked (n, D) factors."""
    n = means.shape[0]
    tau = np.add.reduce(precisions, axis=0)
    mu = np.add.reduce(precisions * means, axis=0) / tau
    log_s = (0.5 * (1 - n) * LOG_2PI
             + 0.5 * np.sum(np.log(precisions), axis=0)
             - 0.5 * np.log(tau)
             - 0.5 * np.sum(precisions * (means - mu) ** 2, axis=0))
    return tau, mu, log_s


def gaussian_product(factors: Sequence[DiagGaussian]) -> FusedRepresentation:
    if len(factors) == 0:
        raise ValueError("gaussian_product needs at least one factor")
    dim = factors[0].dim
    if any(f.dim != dim for f in factors):
        raise ValueError("all factors must share one dimension")
    means = np.stack([f.mean for f in factors])
    precisions = np.stack([f.precision for f in factors])
    tau, mu, log_s = _log_norm_terms(means, precisions)
    return FusedRepresentation(DiagGaussian(mu, tau), log_s)


def fuse_support(views: Sequence[DiagGaussian], prior: PriorSpec = NEGLECT) -> FusedRepresentation:
    """Product of an item's view factors, optionally with a Gaussian prior folded in."""
    evidence = gaussian_product(views)
    if prior.mode == "neglect":
        return evidence
    prior_factor = prior.factor(evidence.product.dim)
    with_prior = gaussian_product([evidence.product, prior_factor])
    return FusedRepresentation(
        product=with_prior.product,
        log_norm_per_dim=evidence.log_norm_per_dim + with_prior.log_norm_per_dim,
        evidence=evidence.product,
        prior_log_norm=with_prior.log_norm_per_dim,
    )


def query_log_score(query: DiagGaussian, support: FusedRepresentation, prior: PriorSpec = NEGLECT) -> float:
    """log(lambda / lambda') of one query against one fused support item."""
    evidence = support.evidence
    if query.dim != evidence.dim:
        raise ValueError(f"query dim {query.dim} != support dim {evidence.dim}")
    log_s_star = gaussian_product([query, evidence]).log_norm_per_dim
    if prior.mode == "neglect":
        return float(np.sum(log_s_star))
    log_s_prime = gaussian_product([prior.factor(evidence.dim), evidence]).log_norm_per_dim
    return float(np.sum(log_s_star - log_s_prime))


def episode_scores(support_sets: Sequence[Sequence[DiagGaussian]], queries: Sequence[DiagGaussian],
                   prior: PriorSpec = NEGLECT, targets=None) -> ScoreMatrix:
    if len(support_sets) == 0 or len(queries) == 0:
        raise ValueError("need at least one support item and one query")
    fused = [fuse_support(views, prior) for views in support_sets]
    values = np.array([[query_log_score(q, f, prior) for f in fused] for q in queries])
    return ScoreMatrix(values, np.zeros(0, dtype=np.int64) if targets is None else targets)


def log_softmax_rows(values: np.ndarray) -> np.ndarray:
    m = np.max(values, axis=1, keepdims=True)
    return values - (m + np.log(np.sum(np.exp(values - m), axis=1, keepdims=True)))


def poem_nll(scores: ScoreMatrix) -> float:
    """Mean cross entropy of the row softmax against the target items."""
    if scores.targets.size != scores.values.shape[0]:
        raise ValueError("score matrix has no targets")
    logp = log_softmax_rows(scores.values)
    return float(-np.mean(logp[np.arange(len(scores.targets)), scores.targets]))


# quadrature oracle


class QuadratureError(ValueError):
    pass


@dataclass(frozen=True)
class QuadratureGrid:
    """Trapezoid grid spanning +-width_sigmas of every factor."""

    n_points: int = 20001
    width_sigmas: float = 10.0
    points_per_sigma: float = 4.0
    tolerance: float = 1e-8

    def __post_init__(self):
        if self.n_points < 20001:
            raise ValueError("quadrature grid needs at least 20001 points")


def log_integral_1d(means, precisions, grid: QuadratureGrid = QuadratureGrid()) -> float:
    """log of the integral of prod_i N(z; mu_i, 1/tau_i) by the trapezoid rule.

    The integrand is shifted by its maximum in log space before
    exponentiating. Raises QuadratureError when halving the resolution moves
    the result by more than ``grid.tolerance`` (relative).
    """
    means = np.asarray(means, dtype=np.float64).ravel()
    precisions = np.asarray(precisions, dtype=np.float64).ravel()
    sigmas = 1.0 / np.sqrt(precisions)
    lo = float(np.min(means - grid.width_sigmas * sigmas))
    hi = float(np.max(means + grid.width_sigmas * sigmas))
    narrowest = 1.0 / np.sqrt(np.sum(precisions))
    n = max(grid.n_points, int(np.ceil((hi - lo) / narrowest * grid.points_per_sigma)) + 1)
    if n % 2 == 0:
        n += 1
    z = np.linspace(lo, hi, n)
    log_f = np.sum(-0.5 * LOG_2PI + 0.5 * np.log(precisions)[:, None]
                   - 0.5 * precisions[:, None] * (z[None, :] - means[:, None]) ** 2, axis=0)
    peak = np.max(log_f)
    f = np.exp(log_f - peak)
    fine = np.trapezoid(f, z)
    coarse = np.trapezoid(f[::2], z[::2])
    if abs(fine - coarse) > grid.tolerance * abs(fine):
        raise QuadratureError(f"grid too coarse: relative change {abs(fine - coarse) / abs(fine):.3e}")
    return float(np.log(fine) + peak)


def brute_force_predictive(support_sets_1d: Sequence[Sequence[DiagGaussian]], queries_1d: Sequence[DiagGaussian],
                           prior: PriorSpec = NEGLECT, grid: QuadratureGrid = QuadratureGrid(),
                           targets=None) -> ScoreMatrix:
    """log(lambda / lambda') per (query, item) by direct numerical integration (D = 1 only).

    With a Gaussian prior lambda' integrates the explicit prior density against
    the views; in neglect mode the prior is a flat unit density.
    """
    for f in [*queries_1d, *(v for views in support_sets_1d for v in views)]:
        if f.dim != 1:
            raise ValueError("brute_force_predictive handles 1-D factors only")
    values = np.zeros((len(queries_1d), len(support_sets_1d)))
    for m, views in enumerate(support_sets_1d):
        v_mu = [v.mean[0] for v in views]
        v_tau = [v.precision[0] for v in views]
        if prior.mode == "gaussian":
            p = prior.factor(1)
            log_lambda_prime = log_integral_1d(v_mu + [p.mean[0]], v_tau + [p.precision[0]], grid)
        else:
            log_lambda_prime = log_integral_1d(v_mu, v_tau, grid)
        for n, q in enumerate(queries_1d):
            log_lambda = log_integral_1d(v_mu + [q.mean[0]], v_tau + [q.precision[0]], grid)
            values[n, m] = log_lambda - log_lambda_prime
    return ScoreMatrix(values, np.zeros(0, dtype=np.int64) if targets is None else targets)


# graph form


def _pairwise_log_norm(g: Graph, mu_a: Node, tau_a: Node, mu_b: Node, tau_b: Node) -> Node:
    """Elementwise log normaliser of N(mu_a, 1/tau_a) * N(mu_b, 1/tau_b) (broadcasting)."""
    tau_sum = tau_a + tau_b
    log_part = g.log(tau_a) + g.log(tau_b) - g.log(tau_sum)
    quad = (tau_a * tau_b / tau_sum) * g.square(mu_a - mu_b)
    return g.shift(g.scale(log_part - quad, 0.5), -0.5 * LOG_2PI)


def fuse_support_graph(g: Graph, support_mean: Node, support_prec: Node, assign: np.ndarray):
    """Per-item product (mean, precision) nodes of shape (M, D) from stacked support rows."""
    a = g.constant(assign)
    tau_m = a @ support_prec
    mu_m = (a @ (support_prec * support_mean)) / tau_m
    return mu_m, tau_m


def poem_scores_graph(g: Graph, support_mean: Node, support_prec: Node, query_mean: Node, query_prec: Node,
                      assign: np.ndarray, n_queries: int, dim: int, prior: PriorSpec = NEGLECT) -> Node:
    """Score matrix node (N, M) for stacked support (V_total, D) and query (N, D) factors.

    ``assign`` is the (M, V_total) 0/1 matrix mapping support rows to items.
    """
    n_items = assign.shape[0]
    mu_m, tau_m = fuse_support_graph(g, support_mean, support_prec, assign)
    per_dim = _pairwise_log_norm(
        g,
        g.reshape(query_mean, (n_queries, 1, dim)), g.reshape(query_prec, (n_queries, 1, dim)),
        g.reshape(mu_m, (1, n_items, dim)), g.reshape(tau_m, (1, n_items, dim)),
    )
    scores = g.sum(per_dim, axes=2)
    if prior.mode == "gaussian":
        p = prior.factor(dim)
        prior_mu = g.constant(p.mean.reshape(1, dim))
        prior_tau = g.constant(p.precision.reshape(1, dim))
        log_s_prime = g.sum(_pairwise_log_norm(g, prior_mu, prior_tau, mu_m, tau_m), axes=1)
        scores = scores - g.reshape(log_s_prime, (1, n_items))
    return scores


def nll_graph(g: Graph, scores: Node, targets: np.ndarray, n_items: int) -> Node:
    """Mean softmax cross entropy of an (N, M) score node; log-sum-exp is stabilised."""
    onehot = np.zeros((len(targets), n_items))
    onehot[np.arange(len(targets)), targets] = 1.0
    picked = g.sum(scores * g.constant(onehot), axes=1, keepdims=True)
    return g.mean(g.logsumexp(scores, axis=1, keepdims=True) - picked)
