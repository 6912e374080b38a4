"""Stacked LSTM encoder mapping a context block to a hidden vector.

Gate equations per step (``*`` elementwise)::

    i = sigmoid(W_ix x + W_ih h + b_i)
    f = sigmoid(W_fx x + W_fh h + b_f)
    o = sigmoid(W_ox x + W_oh h + b_o)
    c' = i * tanh(W_cx x + W_ch h + b_c) + f * c
    h' = o * tanh(c')

Weights act on row vectors (``x @ W``), so ``W_ix`` has shape
``(input, hidden)``. Parameters live in a flat ``{name: array}`` dict with
names ``lstm.<layer>.<W_ix|...|b_c>``.
"""

from dataclasses import dataclass, field

import numpy as np

from .activations import sigmoid
from .autodiff import Node, _lift
from .errors import ContractViolation

GATES = ("i", "f", "o", "c")
PREFIX = "lstm"


@dataclass(frozen=True)
class LstmConfig:
    input_size: int
    hidden_size: int = 100
    num_layers: int = 2

    def layer_input(self, layer):
        return self.input_size if layer == 0 else self.hidden_size


@dataclass
class HiddenState:
    """Per-layer hidden and cell vectors."""

    h: list = field(default_factory=list)
    c: list = field(default_factory=list)

    @classmethod
    def zeros(cls, cfg, batch_shape=()):
        shape = tuple(batch_shape) + (cfg.hidden_size,)
        return cls([np.zeros(shape) for _ in range(cfg.num_layers)],
                   [np.zeros(shape) for _ in range(cfg.num_layers)])


def param_name(layer, kind):
    return f"{PREFIX}.{layer}.{kind}"


def init_lstm_params(cfg, rng):
    """Uniform(-1/sqrt(H), 1/sqrt(H)) initialisation."""
    bound = 1.0 / np.sqrt(cfg.hidden_size)
    params = {}
    for layer in range(cfg.num_layers):
        d_in = cfg.layer_input(layer)
        for g in GATES:
            params[param_name(layer, f"W_{g}x")] = rng.uniform(-bound, bound, (d_in, cfg.hidden_size))
            params[param_name(layer, f"W_{g}h")] = rng.uniform(-bound, bound, (cfg.hidden_size, cfg.hidden_size))
            params[param_name(layer, f"b_{g}")] = rng.uniform(-bound, bound, cfg.hidden_size)
    return params


def config_from_params(params):
    layers = sorted({int(k.split(".")[1]) for k in params if k.startswith(PREFIX + ".")})
    if not layers:
        raise ContractViolation("no LSTM parameters found")
    w = np.shape(params[param_name(0, "W_ix")])
    return LstmConfig(input_size=w[0], hidden_size=w[1], num_layers=len(layers))


def _layer_mats(params, layer):
    wx = np.concatenate([params[param_name(layer, f"W_{g}x")] for g in GATES], axis=1)
    wh = np.concatenate([params[param_name(layer, f"W_{g}h")] for g in GATES], axis=1)
    b = np.concatenate([params[param_name(layer, f"b_{g}")] for g in GATES])
    return wx, wh, b


def _cell(xw, h, c, wh, b):
    """One step given the precomputed input projection ``xw = x @ W_x``."""
    hid = h.shape[-1]
    z = xw + h @ wh + b
    ifo = sigmoid(z[..., :3 * hid])
    i, f, o = ifo[..., :hid], ifo[..., hid:2 * hid], ifo[..., 2 * hid:]
    g = np.tanh(z[..., 3 * hid:])
    c_new = i * g + f * c
    tc = np.tanh(c_new)
    h_new = o * tc
    return h_new, c_new, (i, f, o, g, tc)


def lstm_step(params, x_t, state):
    """Advance every stacked layer by one time step; returns a new HiddenState."""
    cfg = config_from_params(params)
    x = np.asarray(x_t, dtype=np.float64)
    if x.shape[-1] != cfg.input_size:
        raise ContractViolation(f"input dim {x.shape[-1]} != LSTM input size {cfg.input_size}")
    new = HiddenState()
    for layer in range(cfg.num_layers):
        h_prev, c_prev = state.h[layer], state.c[layer]
        if np.shape(h_prev)[-1] != cfg.hidden_size or np.shape(c_prev)[-1] != cfg.hidden_size:
            raise ContractViolation("hidden state size does not match parameters")
        wx, wh, b = _layer_mats(params, layer)
        h, c, _ = _cell(x @ wx, h_prev, c_prev, wh, b)
        new.h.append(h)
        new.c.append(c)
        x = h
    return new


def _run_layer(xs, wx, wh, b, hidden):
    """Forward one layer over ``xs`` ``(B, T, d)``.

    Returns ``hs`` ``(B, T, H)`` and time-major caches for the backward pass.
    """
    batch, steps = xs.shape[0], xs.shape[1]
    H = hidden
    # time-major buffers keep every per-step slice contiguous
    z = np.ascontiguousarray((xs @ wx + b).transpose(1, 0, 2))
    hs = np.empty((steps, batch, H))
    cs = np.zeros((steps + 1, batch, H))
    tcs = np.empty((steps, batch, H))
    h = np.zeros((batch, H))
    for t in range(steps):
        zt = z[t]
        zt += h @ wh
        # gates overwrite their pre-activations in place
        zt[:, :3 * H] = sigmoid(zt[:, :3 * H])
        np.tanh(zt[:, 3 * H:], out=zt[:, 3 * H:])
        c = cs[t + 1]
        np.multiply(zt[:, :H], zt[:, 3 * H:], out=c)
        c += zt[:, H:2 * H] * cs[t]
        np.tanh(c, out=tcs[t])
        h = hs[t]
        np.multiply(zt[:, 2 * H:3 * H], tcs[t], out=h)
    return hs.transpose(1, 0, 2), (z, cs, tcs, hs)


def _layer_backward(g_hs, xv, wx, wh, caches, hidden):
    """BPTT for one layer; ``g_hs`` ``(B, T, H)``."""
    z, cs, tcs, hs = caches
    H = hidden
    steps, batch = z.shape[0], z.shape[1]
    i, f, o, g = z[..., :H], z[..., H:2 * H], z[..., 2 * H:3 * H], z[..., 3 * H:]
    # local derivatives that do not depend on the recurrence
    K = np.empty_like(z)
    K[..., :H] = g * i * (1.0 - i)
    K[..., H:2 * H] = cs[:-1] * f * (1.0 - f)
    K[..., 2 * H:3 * H] = tcs * o * (1.0 - o)
    K[..., 3 * H:] = i * (1.0 - g * g)
    A = o * (1.0 - tcs * tcs)
    G = np.ascontiguousarray(g_hs.transpose(1, 0, 2))
    dz = np.empty_like(z)
    buf = np.empty((batch, 4 * H))
    dh_next = np.zeros((batch, H))
    dc = np.zeros((batch, H))
    wh_t = np.ascontiguousarray(wh.T)
    for t in range(steps - 1, -1, -1):
        dh = G[t] + dh_next
        dc *= f[t + 1] if t + 1 < steps else 0.0
        dc += dh * A[t]
        buf[:, :H] = dc
        buf[:, H:2 * H] = dc
        buf[:, 2 * H:3 * H] = dh
        buf[:, 3 * H:] = dc
        np.multiply(buf, K[t], out=dz[t])
        dh_next = dz[t] @ wh_t
    flat_dz = dz.reshape(-1, 4 * H)
    h_prev = np.concatenate([np.zeros((1, batch, H)), hs[:-1]], axis=0).reshape(-1, H)
    x_tm = xv.transpose(1, 0, 2).reshape(-1, xv.shape[-1])
    d_wx = x_tm.T @ flat_dz
    d_wh = h_prev.T @ flat_dz
    d_b = flat_dz.sum(axis=0)
    return dz, d_wx, d_wh, d_b


def _layer_node(graph, xs, layer_nodes, hidden):
    """Record one LSTM layer over the full sequence as a single tape op."""
    wx_nodes = [layer_nodes[f"W_{g}x"] for g in GATES]
    wh_nodes = [layer_nodes[f"W_{g}h"] for g in GATES]
    b_nodes = [layer_nodes[f"b_{g}"] for g in GATES]
    xs = _lift(graph, xs)
    xv = xs.value
    wx = np.concatenate([n.value for n in wx_nodes], axis=1)
    wh = np.concatenate([n.value for n in wh_nodes], axis=1)
    b = np.concatenate([n.value for n in b_nodes])
    hs, caches = _run_layer(xv, wx, wh, b, hidden)

    def vjp(g_hs, need):
        dz, d_wx, d_wh, d_b = _layer_backward(g_hs, xv, wx, wh, caches, hidden)
        d_x = (dz @ wx.T).transpose(1, 0, 2) if need[0] else None
        split = lambda a, axis: np.split(a, 4, axis=axis)  # noqa: E731
        return (d_x, *split(d_wx, 1), *split(d_wh, 1), *split(d_b, 0))

    parents = (xs, *wx_nodes, *wh_nodes, *b_nodes)
    return graph.record("lstm_layer", hs, parents, vjp)


def encode(params, context):
    """Top-layer hidden state after consuming ``context`` in time order.

    ``context`` is ``(T, d)`` or a batch ``(B, T, d)``. ``params`` may hold
    arrays (pure evaluation) or graph nodes (training); the initial state is
    zero.
    """
    single = np.ndim(context) == 2
    xs = np.asarray(context, dtype=np.float64)
    if single:
        xs = xs[None]
    if xs.ndim != 3 or xs.shape[1] == 0:
        raise ContractViolation(f"context must be (T, d) or (B, T, d) with T >= 1, got {np.shape(context)}")
    nodes = {k: v for k, v in params.items() if isinstance(v, Node)}
    if nodes:
        graph = next(iter(nodes.values())).graph
        cfg = config_from_params({k: v.value if isinstance(v, Node) else v for k, v in params.items()})
        if xs.shape[-1] != cfg.input_size:
            raise ContractViolation(f"context dim {xs.shape[-1]} != LSTM input size {cfg.input_size}")
        out = xs
        for layer in range(cfg.num_layers):
            layer_nodes = {g: _lift(graph, params[param_name(layer, g)])
                           for g in [f"W_{q}x" for q in GATES] + [f"W_{q}h" for q in GATES] + [f"b_{q}" for q in GATES]}
            out = _layer_node(graph, out, layer_nodes, cfg.hidden_size)
        h = out[:, -1, :]
        return h[0] if single else h
    cfg = config_from_params(params)
    if xs.shape[-1] != cfg.input_size:
        raise ContractViolation(f"context dim {xs.shape[-1]} != LSTM input size {cfg.input_size}")
    out = xs
    for layer in range(cfg.num_layers):
        out, _ = _run_layer(out, *_layer_mats(params, layer), cfg.hidden_size)
    h = out[:, -1, :]
    return h[0] if single else h
