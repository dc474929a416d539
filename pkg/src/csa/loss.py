"""Training objectives.

Covers the stochastic event-time losses (factual hinge loss, censoring loss,
time-order loss and their informative-censoring aggregate), the parametric
negative log-likelihoods, the deterministic regression loss, and the
entropically regularized optimal-transport discrepancy used to balance latent
representations across treatment arms. The total objective adds the per-arm
factual losses and the weighted transport term.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, concat, lift, log_ndtr, logsumexp
from .model import SurvivalModel

_HALF_LOG_2PI = 0.5 * math.log(2.0 * math.pi)

# incremented whenever a batch with an empty treatment arm makes the balance
# term (or a per-arm factual term) vacuous
EMPTY_GROUP_WARNINGS = 0


def reset_empty_group_warnings() -> int:
    global EMPTY_GROUP_WARNINGS
    previous = EMPTY_GROUP_WARNINGS
    EMPTY_GROUP_WARNINGS = 0
    return previous


def _note_empty_group() -> None:
    global EMPTY_GROUP_WARNINGS
    EMPTY_GROUP_WARNINGS += 1


@dataclass
class BatchDraws:
    """Per-subject observations plus model draws, controls-first ordering.

    ``t`` holds one sampled (or deterministic) event time per subject and
    ``c`` one censoring-time sample when the censoring heads are active.
    ``aft`` carries distribution parameters instead in the parametric modes.
    The first ``n0`` rows belong to arm 0.
    """

    y: np.ndarray
    delta: np.ndarray
    a: np.ndarray
    n0: int
    t: Tensor | None = None
    c: Tensor | None = None
    r: Tensor | None = None
    aft: tuple | None = None

    def __len__(self) -> int:
        return int(self.y.size)


def forward_batch(model: SurvivalModel, X, y, delta, a, train: bool = False,
                  rng=None) -> BatchDraws:
    """Run the mode-specific forward pass and package it as a BatchDraws.

    Subjects are reordered controls-first so arm routing is a pair of slices;
    every loss below is permutation invariant, so the reorder is harmless.
    """
    y = np.asarray(y, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    a = np.asarray(a)
    idx0 = np.flatnonzero(a == 0)
    idx1 = np.flatnonzero(a == 1)
    order = np.concatenate([idx0, idx1])
    r = model.encode(np.asarray(X, dtype=np.float64), train=train, rng=rng)
    r = r[order]
    n0 = idx0.size
    batch = BatchDraws(y=y[order], delta=delta[order], a=np.asarray(a)[order],
                       n0=n0, r=r)
    mode = model.config.mode
    parts_t, parts_c, parts_aft = [], [], []
    for arm, sl in ((0, slice(0, n0)), (1, slice(n0, None))):
        r_arm = r[sl]
        if r_arm.data.shape[0] == 0:
            continue
        if mode in ("csa", "csa-info"):
            eps = model.draw_noise(r_arm.data.shape[0], rng) if rng is not None else None
            parts_t.append(model.sample_time(r_arm, arm, "event", eps=eps,
                                             train=train, rng=rng))
            if mode == "csa-info":
                eps_c = model.draw_noise(r_arm.data.shape[0], rng) if rng is not None else None
                parts_c.append(model.sample_time(r_arm, arm, "censor", eps=eps_c,
                                                 train=train, rng=rng))
        elif mode in ("aft-ln", "aft-w"):
            parts_aft.append(model.aft_forward(r_arm, arm, train=train, rng=rng))
        else:
            parts_t.append(model.sr_forward(r_arm, arm, train=train, rng=rng))
    if parts_t:
        batch.t = concat(parts_t) if len(parts_t) > 1 else parts_t[0]
    if parts_c:
        batch.c = concat(parts_c) if len(parts_c) > 1 else parts_c[0]
    if parts_aft:
        if len(parts_aft) > 1:
            batch.aft = (concat([p[0] for p in parts_aft]),
                         concat([p[1] for p in parts_aft]))
        else:
            batch.aft = parts_aft[0]
    return batch


def _slice_batch(batch: BatchDraws, sl: slice) -> BatchDraws:
    return BatchDraws(
        y=batch.y[sl], delta=batch.delta[sl], a=batch.a[sl],
        n0=int((batch.a[sl] == 0).sum()),
        t=None if batch.t is None else batch.t[sl],
        c=None if batch.c is None else batch.c[sl],
        r=None if batch.r is None else batch.r[sl],
        aft=None if batch.aft is None else (batch.aft[0][sl], batch.aft[1][sl]),
    )


# ---------------------------------------------------------------------------
# stochastic / deterministic event-time losses
# ---------------------------------------------------------------------------


def csa_factual_loss(batch: BatchDraws) -> Tensor:
    """mean of delta*|y - t| + (1-delta)*max(0, y - t)."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    if batch.t is None:
        raise ValueError("batch carries no event-time samples")
    diff = lift(batch.y) - batch.t
    return (batch.delta * diff.abs() + (1.0 - batch.delta) * diff.relu()).mean()


def censoring_loss(batch: BatchDraws) -> Tensor:
    """mean of (1-delta)*|y - c| + delta*max(0, y - c)."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    if batch.c is None:
        raise ValueError("censoring loss needs censoring-time samples "
                         "(informative-censoring mode only)")
    diff = lift(batch.y) - batch.c
    return ((1.0 - batch.delta) * diff.abs() + batch.delta * diff.relu()).mean()


def time_order_loss(batch: BatchDraws) -> Tensor:
    """Penalty for sampled times ordered inconsistently with delta."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    if batch.t is None or batch.c is None:
        raise ValueError("time-order loss needs both event and censoring samples")
    gap = batch.t - batch.c
    return (batch.delta * gap.relu() + (1.0 - batch.delta) * (-gap).relu()).mean()


def csa_info_loss(batch: BatchDraws) -> Tensor:
    return csa_factual_loss(batch) + censoring_loss(batch) + time_order_loss(batch)


def sr_loss(batch: BatchDraws) -> Tensor:
    """Deterministic accuracy objective; same functional form as the factual loss."""
    return csa_factual_loss(batch)


# ---------------------------------------------------------------------------
# parametric negative log-likelihoods
# ---------------------------------------------------------------------------


def lognormal_logpdf(y, mu, sigma):
    y = lift(y)
    z = (y.log() - mu) / sigma
    return -(y.log()) - sigma.log() - _HALF_LOG_2PI - 0.5 * z * z


def lognormal_logsf(y, mu, sigma):
    z = (lift(y).log() - mu) / sigma
    return log_ndtr(-z)


def weibull_logpdf(y, lam, k):
    y = lift(y)
    log_ratio = y.log() - lam.log()
    return k.log() - lam.log() + (k - 1.0) * log_ratio - (log_ratio * k).exp()


def weibull_logsf(y, lam, k):
    log_ratio = lift(y).log() - lam.log()
    return -((log_ratio * k).exp())


def aft_nll(batch: BatchDraws, family: str) -> Tensor:
    """Censoring-aware negative log-likelihood for a parametric family."""
    if len(batch) == 0:
        raise ValueError("empty batch")
    if batch.aft is None:
        raise ValueError("batch carries no distribution parameters")
    if np.any(batch.y <= 0):
        raise ValueError("observed times must be positive")
    p1, p2 = batch.aft
    if np.any(p2.data <= 0):
        raise ValueError("non-positive scale/shape parameter")
    if family == "log-normal":
        logf = lognormal_logpdf(batch.y, p1, p2)
        logs = lognormal_logsf(batch.y, p1, p2)
    elif family == "weibull":
        logf = weibull_logpdf(batch.y, p1, p2)
        logs = weibull_logsf(batch.y, p1, p2)
    else:
        raise ValueError(f"unknown AFT family {family!r}")
    return -((batch.delta * logf + (1.0 - batch.delta) * logs).mean())


# ---------------------------------------------------------------------------
# Sinkhorn optimal-transport discrepancy
# ---------------------------------------------------------------------------


@dataclass
class IpmConfig:
    """Entropic optimal transport settings.

    ``epsilon`` is relative to the mean ground cost of the pair of point
    clouds when ``scale_by_mean_cost`` is set, which keeps the blur
    proportionate regardless of latent dimensionality; with the flag off it
    is the absolute blur. ``tol`` is the sup-norm marginal violation that
    stops the iterations early; zero runs exactly ``max_iters`` rounds.
    """

    epsilon: float = 0.1
    max_iters: int = 200
    tol: float = 1e-6
    scale_by_mean_cost: bool = True

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ValueError("epsilon must be positive")
        if self.max_iters < 1:
            raise ValueError("max_iters must be at least 1")


def _pairwise_sq_dists(x: Tensor, y: Tensor) -> Tensor:
    n, d = x.data.shape
    m = y.data.shape[0]
    diff = x.reshape(n, 1, d) - y.reshape(1, m, d)
    return (diff * diff).sum(axis=2)


def _entropic_transport_cost(cost: Tensor, eps: Tensor, max_iters: int,
                             tol: float) -> Tensor:
    """<P, C> for the entropic plan between uniform marginals via log-domain
    Sinkhorn iterations; the whole loop stays on the differentiation tape."""
    n, m = cost.data.shape
    log_a = -math.log(n)
    log_b = -math.log(m)
    f = lift(np.zeros(n))
    g = lift(np.zeros(m))
    for it in range(max_iters):
        f = -eps * logsumexp((g.reshape(1, m) - cost) / eps + log_b, axis=1)
        g = -eps * logsumexp((f.reshape(n, 1) - cost) / eps + log_a, axis=0)
        if tol > 0:
            log_p = ((f.data[:, None] + g.data[None, :] - cost.data) / float(eps.data)
                     + log_a + log_b)
            violation = np.abs(np.exp(log_p).sum(axis=1) - 1.0 / n).max()
            if violation < tol:
                break
    log_plan = (f.reshape(n, 1) + g.reshape(1, m) - cost) / eps + (log_a + log_b)
    return (log_plan.exp() * cost).sum()


def entropic_transport_cost(x, y, config: IpmConfig | None = None) -> Tensor:
    """Undebiased transport cost <P, C> of the entropic plan.

    Decreases monotonically toward the exact optimal-transport cost as
    ``epsilon`` shrinks (the blurred plan is suboptimal for the linear cost).
    """
    config = config or IpmConfig()
    x = lift(x)
    y = lift(y)
    cost = _pairwise_sq_dists(x, y)
    if config.scale_by_mean_cost:
        eps = config.epsilon * (cost.mean() + 1e-300)
    else:
        eps = lift(config.epsilon)
    return _entropic_transport_cost(cost, eps, config.max_iters, config.tol)


def sinkhorn_ipm(r_treated, r_control, config: IpmConfig | None = None) -> Tensor:
    """Debiased entropic optimal-transport cost between two latent clouds.

    Uniform weights within each cloud, squared-Euclidean ground metric. The
    self-transport terms are subtracted so identical clouds score exactly
    zero; the result is clamped at zero. An empty cloud yields 0 and bumps
    the module warning counter.
    """
    config = config or IpmConfig()
    x = lift(r_treated)
    y = lift(r_control)
    if x.data.ndim == 1:
        x = x.reshape(x.data.size, 1)
    if y.data.ndim == 1:
        y = y.reshape(y.data.size, 1)
    if x.data.shape[0] == 0 or y.data.shape[0] == 0:
        _note_empty_group()
        return lift(0.0)
    cost_xy = _pairwise_sq_dists(x, y)
    if config.scale_by_mean_cost:
        eps = config.epsilon * (cost_xy.mean() + 1e-300)
    else:
        eps = lift(config.epsilon)
    ot_xy = _entropic_transport_cost(cost_xy, eps, config.max_iters, config.tol)
    ot_xx = _entropic_transport_cost(_pairwise_sq_dists(x, x), eps,
                                     config.max_iters, config.tol)
    ot_yy = _entropic_transport_cost(_pairwise_sq_dists(y, y), eps,
                                     config.max_iters, config.tol)
    return (ot_xy - 0.5 * ot_xx - 0.5 * ot_yy).relu()


# ---------------------------------------------------------------------------
# consolidated objective
# ---------------------------------------------------------------------------


def factual_loss(batch: BatchDraws, mode: str) -> Tensor:
    if mode == "csa":
        return csa_factual_loss(batch)
    if mode == "csa-info":
        return csa_info_loss(batch)
    if mode == "aft-ln":
        return aft_nll(batch, "log-normal")
    if mode == "aft-w":
        return aft_nll(batch, "weibull")
    if mode == "sr":
        return sr_loss(batch)
    raise ValueError(f"unknown mode {mode!r}")


def total_objective(batch: BatchDraws, mode: str, alpha: float,
                    ipm_config: IpmConfig | None = None,
                    ipm_disabled: bool = False):
    """Unweighted per-arm factual losses plus alpha times the balance term.

    Returns the scalar objective and a component dictionary (which also
    reports the treated-fraction-weighted factual loss ``l_f``).
    """
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    n = len(batch)
    if n == 0:
        raise ValueError("empty batch")
    n0 = batch.n0
    parts = {}
    zero = lift(0.0)
    if n0 > 0:
        parts["l_f_a0"] = factual_loss(_slice_batch(batch, slice(0, n0)), mode)
    else:
        _note_empty_group()
        parts["l_f_a0"] = zero
    if n - n0 > 0:
        parts["l_f_a1"] = factual_loss(_slice_batch(batch, slice(n0, None)), mode)
    else:
        _note_empty_group()
        parts["l_f_a1"] = zero
    total = parts["l_f_a0"] + parts["l_f_a1"]
    if alpha > 0 and not ipm_disabled:
        if batch.r is None:
            raise ValueError("balance term needs latent representations")
        parts["ipm"] = sinkhorn_ipm(batch.r[slice(n0, None)], batch.r[slice(0, n0)],
                                    ipm_config)
        total = total + alpha * parts["ipm"]
    else:
        parts["ipm"] = zero
    if mode == "csa-info" and batch.c is not None:
        parts["l_c"] = censoring_loss(batch)
        parts["l_tc"] = time_order_loss(batch)
    u = (n - n0) / n
    parts["l_f"] = u * parts["l_f_a1"] + (1.0 - u) * parts["l_f_a0"]
    return total, parts
