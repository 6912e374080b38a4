"""Energy score: a strictly proper multivariate scoring rule for scenario sets.

For samples ``w_1..w_m`` and an observation ``x`` the plug-in estimator is::

    ES = 1/m * sum_i |w_i - x|^beta  -  1/(2 m^2) * sum_i sum_j |w_i - w_j|^beta

with the double sum over all ordered pairs (the ``i == j`` terms are zero).
"""

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist

from .autodiff import Node
from .errors import ConfigurationError, ContractViolation

# distances below this contribute a zero subgradient
TINY_DISTANCE = 1e-12


@dataclass(frozen=True)
class EnergyScoreConfig:
    beta: float = 1.0

    def __post_init__(self):
        check_beta(self.beta)


def check_beta(beta):
    if not 0.0 < beta < 2.0:
        raise ConfigurationError(f"energy-score beta must lie in (0, 2), got {beta}")


def _check(samples, x):
    samples = np.asarray(samples, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if samples.ndim == 1:
        samples = samples[:, None]
    if x.ndim == 0:
        x = x[None]
    if samples.shape[0] == 0:
        raise ContractViolation("energy score needs at least one sample")
    if samples.shape[-1] != x.shape[-1] or samples.shape[-1] == 0:
        raise ContractViolation(f"sample dim {samples.shape[-1]} != observation dim {x.shape[-1]}")
    return samples, x


def energy_score(samples, x, beta=1.0):
    """Energy score of an ``(m, d)`` sample matrix against a ``d`` vector."""
    check_beta(beta)
    samples, x = _check(samples, x)
    m = samples.shape[0]
    d_obs = np.linalg.norm(samples - x, axis=1)
    d_pair = cdist(samples, samples)
    if beta != 1.0:
        d_obs = d_obs ** beta
        d_pair = d_pair ** beta
    return float(d_obs.sum() / m - d_pair.sum() / (2.0 * m * m))


def _pow_weights(dist, beta):
    # |v|^beta gradient is beta * |v|^(beta-2) * v; zero at coincident points
    with np.errstate(divide="ignore", invalid="ignore"):
        w = beta * dist ** (beta - 2.0)
    return np.where(dist < TINY_DISTANCE, 0.0, w)


def _pair_distances(samples):
    """All pairwise distances per batch via a centred Gram matrix, ``(B, m, m)``."""
    c = samples - samples.mean(axis=1, keepdims=True)
    sq = np.einsum("bmd,bmd->bm", c, c)
    d2 = sq[:, :, None] + sq[:, None, :] - 2.0 * (c @ c.transpose(0, 2, 1))
    # the Gram form loses digits for close pairs; recompute those directly
    close = d2 <= 1e-8 * (sq[:, :, None] + sq[:, None, :])
    b, i, j = np.nonzero(close)
    diff = c[b, i] - c[b, j]
    d2[b, i, j] = np.einsum("kd,kd->k", diff, diff)
    np.maximum(d2, 0.0, out=d2)
    d = np.sqrt(d2)
    # the diagonal is exactly zero by definition
    idx = np.arange(samples.shape[1])
    d[:, idx, idx] = 0.0
    return d


def _batch_terms(samples, x, beta, with_grad):
    samples = np.asarray(samples, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    m = samples.shape[1]
    if m == 0:
        raise ContractViolation("energy score needs at least one sample")
    r = samples - x[:, None, :]
    d_obs = np.sqrt(np.einsum("bmd,bmd->bm", r, r))
    d_pair = _pair_distances(samples)
    if beta == 1.0:
        value = d_obs.sum(axis=1) / m - d_pair.sum(axis=(1, 2)) / (2.0 * m * m)
    else:
        value = (d_obs ** beta).sum(axis=1) / m - (d_pair ** beta).sum(axis=(1, 2)) / (2.0 * m * m)
    if not with_grad:
        return value, None, None
    g_obs = _pow_weights(d_obs, beta)[..., None] * r / m
    wp = _pow_weights(d_pair, beta)
    # sum_j w_ij (s_i - s_j); each unordered pair appears twice in the double sum
    g_pair = (wp.sum(axis=2)[..., None] * samples - wp @ samples) / (m * m)
    g_samples = g_obs - g_pair
    return value, g_samples, -g_obs.sum(axis=1)


def energy_score_batch(samples, x, beta=1.0):
    """Scores for a batch: ``samples`` ``(B, m, d)``, ``x`` ``(B, d)`` -> ``(B,)``."""
    check_beta(beta)
    samples = np.asarray(samples, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    # bound the (chunk, m, m) distance tensor to ~16M entries
    chunk = max(1, (1 << 24) // max(1, samples.shape[1] ** 2))
    return np.concatenate([_batch_terms(samples[k:k + chunk], x[k:k + chunk], beta, False)[0]
                           for k in range(0, len(samples), chunk)]) if len(samples) else np.zeros(0)


def energy_score_batch_grad(samples, x, beta=1.0):
    """Gradients of :func:`energy_score_batch` (summed over the batch).

    Returns ``(d/d samples, d/d x)`` with the input shapes.
    """
    _, gs, gx = _batch_terms(samples, x, beta, True)
    return gs, gx


def energy_score_grad(samples, x, beta=1.0):
    """Gradient of :func:`energy_score` w.r.t. the samples and the observation."""
    samples, x = _check(samples, x)
    gs, gx = energy_score_batch_grad(samples[None], x[None], beta)
    return gs[0], gx[0]


def mean_energy_score(samples, x, beta=1.0):
    """Batch-mean energy score; records a tape node when ``samples`` is a Node.

    ``samples`` ``(B, m, d)``, ``x`` ``(B, d)`` (observations are data).
    """
    check_beta(beta)
    if not isinstance(samples, Node):
        return float(energy_score_batch(samples, x, beta).mean())
    sv = samples.value
    xv = np.asarray(x, dtype=np.float64)
    batch = sv.shape[0]
    scores, gs, _ = _batch_terms(sv, xv, beta, True)
    value = np.asarray(scores.mean())

    def vjp(g, need):
        return (g * gs / batch,)

    return samples.graph.record("energy_score", value, (samples,), vjp)


def energy_score_per_step(scenarios, actual, beta=1.0):
    """Cross-sectional score per horizon step.

    ``scenarios`` ``(m, S, tau)``, ``actual`` ``(S, tau)`` -> ``(tau,)``: each
    step scores the ``S``-dim vector of all series at that step.
    """
    scenarios = np.asarray(scenarios, dtype=np.float64)
    actual = np.asarray(actual, dtype=np.float64)
    return np.array([energy_score(scenarios[:, :, t], actual[:, t], beta) for t in range(actual.shape[1])])


def energy_score_flat(scenarios, actual, beta=1.0):
    """Score of the flattened ``S * tau`` trajectory vector."""
    scenarios = np.asarray(scenarios, dtype=np.float64)
    m = scenarios.shape[0]
    return energy_score(scenarios.reshape(m, -1), np.asarray(actual).reshape(-1), beta)
