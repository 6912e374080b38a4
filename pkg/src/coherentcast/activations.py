"""Scalar activation functions and their first two derivatives.

Every function here is vectorised over numpy arrays. The Gaussian softplus is
``g(x) = x * Phi(x) + phi(x)`` with ``Phi``/``phi`` the standard normal CDF and
PDF; its derivative is ``Phi``, so it is smooth, convex and non-decreasing.
"""

import math

import numpy as np
from scipy.special import erfc

from .errors import ConfigurationError

ACTIVATIONS = ("relu", "gaussian-softplus", "sigmoid", "tanh")

# one-letter codes used in activation strings such as "rg"
SHORT_CODES = {"r": "relu", "g": "gaussian-softplus", "s": "sigmoid", "t": "tanh"}

# activations allowed on the convex (alpha) path of the network
CONVEX_NONDECREASING = frozenset({"relu", "gaussian-softplus"})

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def normal_cdf(x):
    """Standard normal CDF through ``erfc``, accurate to ~1e-16 absolute."""
    return 0.5 * erfc(-np.asarray(x, dtype=np.float64) * _INV_SQRT2)


def normal_pdf(x):
    x = np.asarray(x, dtype=np.float64)
    return _INV_SQRT2PI * np.exp(-0.5 * x * x)


def sigmoid(x):
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def resolve(kind):
    """Map a one-letter code or full name to a canonical activation name."""
    name = SHORT_CODES.get(kind, kind)
    if name not in ACTIVATIONS:
        raise ConfigurationError(f"unknown activation {kind!r}; expected one of {ACTIVATIONS}")
    return name


def eval_activation(kind, x):
    kind = resolve(kind)
    x = np.asarray(x, dtype=np.float64)
    if kind == "relu":
        out = np.maximum(x, 0.0)
    elif kind == "gaussian-softplus":
        out = x * normal_cdf(x) + normal_pdf(x)
    elif kind == "sigmoid":
        out = sigmoid(x)
    else:
        out = np.tanh(x)
    return out if out.ndim else float(out)


def activation_deriv(kind, x):
    """First derivative; ReLU uses 0 at the kink."""
    kind = resolve(kind)
    x = np.asarray(x, dtype=np.float64)
    if kind == "relu":
        out = (x > 0).astype(np.float64)
    elif kind == "gaussian-softplus":
        out = normal_cdf(x)
    elif kind == "sigmoid":
        s = sigmoid(x)
        out = s * (1.0 - s)
    else:
        t = np.tanh(x)
        out = 1.0 - t * t
    return out if out.ndim else float(out)


def activation_deriv2(kind, x):
    """Second derivative, needed to back-propagate through quantile tangents."""
    kind = resolve(kind)
    x = np.asarray(x, dtype=np.float64)
    if kind == "relu":
        out = np.zeros_like(x)
    elif kind == "gaussian-softplus":
        out = normal_pdf(x)
    elif kind == "sigmoid":
        s = sigmoid(x)
        out = s * (1.0 - s) * (1.0 - 2.0 * s)
    else:
        t = np.tanh(x)
        out = -2.0 * t * (1.0 - t * t)
    return out if out.ndim else float(out)


def parse_activation_string(code):
    """``"rg"`` -> ``["relu", "gaussian-softplus"]``."""
    if not code:
        raise ConfigurationError("activation string must not be empty")
    return [resolve(c) for c in code]
