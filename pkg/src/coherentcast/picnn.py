"""Partially input-convex network ``f(alpha, h)``, convex in the quantile level.

Layer ``i`` (``u_0 = h``, ``v_0 = alpha``, row-vector convention)::

    u_{i+1} = g_u( u_i W_uu + b_uu )
    v_{i+1} = g_v( (v_i * relu(u_i W_vu + b_vu)) W_v
                 + (alpha * relu(u_i W_au + b_au)) W_a
                 + u_i W_u + b_v )

``f = sum(v_k)``. With ``W_v, W_a >= 0`` and every ``g_v`` convex and
non-decreasing, ``f`` is convex in ``alpha``, so ``q = grad_alpha f`` is a
monotone map: quantiles never cross.

``q`` is computed exactly by pushing the Jacobian ``J_i = d v_i / d alpha``
(stored as ``(..., tau, width)``, one row per tangent direction) forward
alongside ``v_i``. Both are built from :mod:`coherentcast.autodiff` ops, so
the same code evaluates on arrays or records onto a training graph.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .activations import CONVEX_NONDECREASING, parse_activation_string, resolve
from .autodiff import Node
from .errors import ConfigurationError, ContractViolation, DomainError, InvariantError

PREFIX = "picnn"
NONNEGATIVE = ("W_v", "W_a")


@dataclass(frozen=True)
class PicnnConfig:
    alpha_dim: int
    context_dim: int
    hidden: int = 40
    activations: str = "rg"
    u_activation: str = "tanh"
    out_width: int = 0  # 0 -> same as hidden

    def __post_init__(self):
        kinds = parse_activation_string(self.activations)
        bad = [k for k in kinds if k not in CONVEX_NONDECREASING]
        if bad:
            raise ConfigurationError(f"alpha-path activations must be convex non-decreasing, got {bad}")
        resolve(self.u_activation)
        if self.alpha_dim < 1 or self.context_dim < 1 or self.hidden < 1:
            raise ConfigurationError("PICNN dimensions must be positive")

    @property
    def layers(self):
        return len(self.activations)

    @property
    def v_kinds(self):
        return parse_activation_string(self.activations)

    @property
    def final_width(self):
        return self.out_width or self.hidden

    def widths(self, layer):
        """``(u_in, v_in, v_out)`` for a layer."""
        u_in = self.context_dim if layer == 0 else self.hidden
        v_in = self.alpha_dim if layer == 0 else self.hidden
        v_out = self.final_width if layer == self.layers - 1 else self.hidden
        return u_in, v_in, v_out


def param_name(layer, kind):
    return f"{PREFIX}.{layer}.{kind}"


def init_picnn_params(cfg, rng):
    """Random initialisation with the nonnegative blocks drawn nonnegative.

    ``W_uu``/``b_uu`` exist only for layers whose ``u`` output is consumed.
    The last layer's nonnegative blocks are shrunk by its width so the
    initial quantile scale does not grow with the output sum.
    """
    params = {}
    tau = cfg.alpha_dim
    for i in range(cfg.layers):
        u_in, v_in, v_out = cfg.widths(i)
        su = 1.0 / np.sqrt(u_in)
        if i < cfg.layers - 1:
            params[param_name(i, "W_uu")] = rng.uniform(-su, su, (u_in, cfg.hidden))
            params[param_name(i, "b_uu")] = rng.uniform(-su, su, cfg.hidden)
        params[param_name(i, "W_vu")] = rng.uniform(-su, su, (u_in, v_in))
        params[param_name(i, "b_vu")] = rng.uniform(0.5, 1.0, v_in)
        params[param_name(i, "W_au")] = rng.uniform(-su, su, (u_in, tau))
        params[param_name(i, "b_au")] = rng.uniform(0.5, 1.0, tau)
        shrink = v_out if i == cfg.layers - 1 else 1
        params[param_name(i, "W_v")] = rng.uniform(0.0, 2.0 / (v_in * shrink), (v_in, v_out))
        params[param_name(i, "W_a")] = rng.uniform(0.0, 2.0 / (tau * shrink), (tau, v_out))
        params[param_name(i, "W_u")] = rng.uniform(-su, su, (u_in, v_out))
        params[param_name(i, "b_v")] = rng.uniform(-0.1, 0.1, v_out)
    return params


def project_weights(params):
    """Clamp every ``W_v``/``W_a`` entry at zero; other entries are untouched."""
    out = dict(params)
    for name, value in params.items():
        if name.startswith(PREFIX + ".") and name.rsplit(".", 1)[1] in NONNEGATIVE:
            out[name] = np.maximum(value, 0.0)
    return out


def check_nonnegative(params):
    for name, value in params.items():
        if name.startswith(PREFIX + ".") and name.rsplit(".", 1)[1] in NONNEGATIVE:
            v = value.value if isinstance(value, Node) else value
            if np.any(np.asarray(v) < 0):
                raise InvariantError(f"{name} has negative entries; call project_weights")


def check_alpha(alpha):
    a = alpha.value if isinstance(alpha, Node) else np.asarray(alpha)
    if not np.all((a > 0.0) & (a < 1.0)):
        raise DomainError("quantile levels must lie strictly inside (0, 1)")


def _expand_to(x, extra):
    for _ in range(extra):
        x = ad.expand_dims(x, -2)
    return x


def _forward(params, cfg, alpha, h, with_tangent):
    check_nonnegative(params)
    check_alpha(alpha)
    a_shape = alpha.shape if isinstance(alpha, Node) else np.shape(alpha)
    h_shape = h.shape if isinstance(h, Node) else np.shape(h)
    if a_shape[-1] != cfg.alpha_dim:
        raise ContractViolation(f"alpha dim {a_shape[-1]} != {cfg.alpha_dim}")
    if h_shape[-1] != cfg.context_dim:
        raise ContractViolation(f"context dim {h_shape[-1]} != {cfg.context_dim}")
    # alpha may carry extra sample axes between the batch and the last axis
    extra = len(a_shape) - len(h_shape)
    if extra < 0:
        raise ContractViolation("alpha must have at least as many dims as h")

    u = h
    v = alpha
    jac = None
    for i, kind in enumerate(cfg.v_kinds):
        p = lambda k: params[param_name(i, k)]  # noqa: E731
        gate_v = _expand_to(ad.relu(ad.add(ad.matmul(u, p("W_vu")), p("b_vu"))), extra)
        gate_a = _expand_to(ad.relu(ad.add(ad.matmul(u, p("W_au")), p("b_au"))), extra)
        lin_u = _expand_to(ad.add(ad.matmul(u, p("W_u")), p("b_v")), extra)
        z = ad.add(ad.add(ad.matmul(ad.mul(v, gate_v), p("W_v")),
                          ad.matmul(ad.mul(alpha, gate_a), p("W_a"))), lin_u)
        if with_tangent:
            # d z / d alpha with tangent directions on axis -2
            da = ad.mul(ad.expand_dims(gate_a, -1), p("W_a"))
            if jac is None:
                dz = ad.add(ad.mul(ad.expand_dims(gate_v, -1), p("W_v")), da)
            else:
                dz = ad.add(ad.matmul(ad.mul(jac, ad.expand_dims(gate_v, -2)), p("W_v")), da)
            jac = ad.mul(dz, ad.expand_dims(ad.activation_grad(kind, z), -2))
        v = ad.activation(kind, z)
        if i < cfg.layers - 1:
            u = ad.activation(cfg.u_activation, ad.add(ad.matmul(u, p("W_uu")), p("b_uu")))
    return v, jac


def picnn_forward(params, cfg, alpha, h):
    """``f(alpha, h)``; leading batch/sample axes of ``alpha`` are preserved."""
    v, _ = _forward(params, cfg, alpha, h, with_tangent=False)
    return ad.reduce_sum(v, axis=-1)


def quantile(params, cfg, alpha, h):
    """Quantile map ``q(alpha | h) = grad_alpha f``, same shape as ``alpha``.

    ``h`` is ``(..., context_dim)``; ``alpha`` is ``(..., tau)`` or has extra
    sample axes, e.g. ``h (B, H)`` with ``alpha (B, m, tau)``.
    """
    _, jac = _forward(params, cfg, alpha, h, with_tangent=True)
    return ad.reduce_sum(jac, axis=-1)


@dataclass
class ScenarioSet:
    samples: np.ndarray  # (m, tau) or (B, m, tau)
    seed: int
    origin: object = None

    @property
    def m(self):
        return self.samples.shape[-2]


def draw_levels(rng, shape, eps=1e-6):
    """Uniform quantile levels kept strictly inside the open unit cube."""
    return np.clip(rng.random(shape), eps, 1.0 - eps)


def sample_scenarios(params, cfg, h, m, seed, origin=None):
    """Draw ``m`` i.i.d. level vectors and map them through ``q(. | h)``."""
    if m < 1:
        raise ContractViolation("scenario count m must be >= 1")
    rng = np.random.default_rng(seed)
    h = np.asarray(h, dtype=np.float64)
    alpha = draw_levels(rng, h.shape[:-1] + (m, cfg.alpha_dim))
    return ScenarioSet(np.asarray(quantile(params, cfg, alpha, h)), seed, origin)
