"""Per-series forecasters and their training loops.

``PicnnForecaster`` is the LSTM encoder feeding a PICNN quantile map and is
trained on the energy score. ``MlpQuantileForecaster`` is the quantile
regression baseline trained on summed pinball loss.

Both work in scaled units; the stored target scaler converts scenarios back
to kWh.
"""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, backward
from .data import MinMaxScaler
from .energy import check_beta, mean_energy_score
from .errors import ConfigurationError, DivergenceError
from .lstm import LstmConfig, encode, init_lstm_params
from .optim import AdamState, adam_step
from .picnn import PicnnConfig, draw_levels, init_picnn_params, project_weights, quantile

MLP_LEVELS = (0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 0.95)


@dataclass
class TrainConfig:
    batch_size: int = 64
    lr: float = 0.001
    max_epochs: int = 200
    patience: int = 20
    train_samples: int = 64  # scenarios per window in the loss
    val_samples: int = 64
    beta: float = 1.0
    seed: int = 0
    max_batches: int = 0  # 0: full pass per epoch

    def __post_init__(self):
        check_beta(self.beta)
        if self.batch_size < 1 or self.max_epochs < 1 or self.train_samples < 1:
            raise ConfigurationError("batch size, epochs and sample counts must be positive")


@dataclass
class Dataset:
    """Scaled model inputs: ``context (N, C, d)``, ``future (N, tau, d_f)``, ``target (N, tau)``."""

    context: np.ndarray
    future: np.ndarray
    target: np.ndarray

    def __len__(self):
        return len(self.target)

    def batch(self, idx):
        return Dataset(self.context[idx], self.future[idx], self.target[idx])


def _finite_or_raise(value, epoch):
    if not np.all(np.isfinite(value)):
        raise DivergenceError(epoch)


# ---------------------------------------------------------------------------
# LSTM + PICNN


@dataclass
class PicnnForecaster:
    lstm: LstmConfig
    picnn: PicnnConfig
    params: dict
    scaler: MinMaxScaler
    use_future: bool = True
    history: list = field(default_factory=list)

    kind = "lstm-picnn"

    @property
    def horizon(self):
        return self.picnn.alpha_dim

    @classmethod
    def build(cls, input_size, horizon, future_dim, scaler, hidden=100, layers=2,
              picnn_hidden=40, activations="rg", u_activation="tanh", use_future=True, seed=0):
        rng = np.random.default_rng(seed)
        lcfg = LstmConfig(input_size, hidden, layers)
        ctx_dim = hidden + (horizon * future_dim if use_future else 0)
        pcfg = PicnnConfig(horizon, ctx_dim, picnn_hidden, activations, u_activation)
        params = {**init_lstm_params(lcfg, rng), **init_picnn_params(pcfg, rng)}
        return cls(lcfg, pcfg, params, scaler, use_future)

    def condition(self, params, data):
        """Context vector for the PICNN: encoder state plus flattened future covariates."""
        h = encode(params, data.context)
        if not self.use_future:
            return h
        fut = data.future.reshape(len(data.future), -1)
        return ad.concat([h, fut], axis=-1) if isinstance(h, ad.Node) else np.concatenate([h, fut], axis=-1)

    def sample_scaled(self, data, m, seed, params=None):
        """Scenarios ``(N, m, tau)`` in scaled units; one generator per call."""
        params = self.params if params is None else params
        rng = np.random.default_rng(seed)
        h = self.condition(params, data)
        alpha = draw_levels(rng, (len(data), m, self.horizon))
        return np.asarray(quantile(params, self.picnn, alpha, h))

    def sample(self, data, m, seed, chunk=0):
        """Scenarios ``(N, m, tau)`` in kWh.

        ``chunk`` limits how many scenarios go through the network at once;
        the levels are drawn up front so the result does not depend on it.
        """
        rng = np.random.default_rng(seed)
        h = self.condition(self.params, data)
        alpha = draw_levels(rng, (len(data), m, self.horizon))
        step = chunk or m
        parts = [np.asarray(quantile(self.params, self.picnn, alpha[:, k:k + step], h))
                 for k in range(0, m, step)]
        return self.scaler.inverse(np.concatenate(parts, axis=1))

    def loss_node(self, params, data, alpha, beta):
        h = self.condition(params, data)
        q = quantile(params, self.picnn, alpha, h)
        return mean_energy_score(q, data.target, beta)

    def validation_score(self, data, cfg, params=None):
        """Mean energy score on ``data`` with fixed levels (deterministic)."""
        params = self.params if params is None else params
        rng = np.random.default_rng(cfg.seed + 7919)
        scores = []
        for start in range(0, len(data), 256):
            b = data.batch(slice(start, start + 256))
            alpha = draw_levels(rng, (len(b), cfg.val_samples, self.horizon))
            h = self.condition(params, b)
            q = np.asarray(quantile(params, self.picnn, alpha, h))
            scores.append(mean_energy_score(q, b.target, cfg.beta) * len(b))
        return float(sum(scores) / len(data))


def train_picnn(model, train, val, cfg, log=None):
    """Adam on the batch-mean energy score with projection after each step.

    Keeps the parameters with the best validation score and stops after
    ``cfg.patience`` epochs without improvement.
    """
    rng = np.random.default_rng(cfg.seed)
    params = project_weights(model.params)
    state = AdamState.for_params(params, lr=cfg.lr)
    best_val = model.validation_score(val, cfg, params)
    best, best_epoch = params, 0
    model.history = [{"epoch": 0, "train": None, "val": best_val}]
    n = len(train)
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(n)
        losses = []
        starts = list(range(0, n, cfg.batch_size))
        if cfg.max_batches:
            starts = starts[: cfg.max_batches]
        for start in starts:
            batch = train.batch(order[start:start + cfg.batch_size])
            alpha = draw_levels(rng, (len(batch), cfg.train_samples, model.horizon))
            graph = Graph()
            loss = model.loss_node(graph.params_from(params), batch, alpha, cfg.beta)
            _finite_or_raise(loss.value, epoch)
            grads = backward(graph, loss)
            for g in grads.values():
                _finite_or_raise(g, epoch)
            params, state = adam_step(state, params, grads)
            params = project_weights(params)
            losses.append(float(loss.value))
        val_score = model.validation_score(val, cfg, params)
        _finite_or_raise(val_score, epoch)
        model.history.append({"epoch": epoch, "train": float(np.mean(losses)), "val": val_score})
        if log:
            log(f"epoch {epoch}: train {np.mean(losses):.5f} val {val_score:.5f}")
        if val_score < best_val:
            best, best_val, best_epoch = params, val_score, epoch
        elif epoch - best_epoch >= cfg.patience:
            break
    model.params = best
    return model


# ---------------------------------------------------------------------------
# MLP quantile regression baseline


def pinball_node(pred, target, levels):
    """Pinball loss summed over levels, averaged over the rest.

    ``pred`` ``(N, tau, L)`` node, ``target`` ``(N, tau)``, ``levels`` ``(L,)``.
    """
    pv = pred.value
    lv = np.asarray(levels)
    d = np.asarray(target)[..., None] - pv
    under = d >= 0
    loss = np.where(under, lv * d, (lv - 1.0) * d)
    count = d.shape[0] * d.shape[1]
    value = np.asarray(loss.sum() / count)

    def vjp(g, need):
        return (g * np.where(under, -lv, 1.0 - lv) / count,)

    return pred.graph.record("pinball", value, (pred,), vjp)


@dataclass
class MlpQuantileForecaster:
    widths: tuple
    params: dict
    scaler: MinMaxScaler
    horizon: int
    levels: tuple = MLP_LEVELS
    history: list = field(default_factory=list)

    kind = "mlp-qr"

    @classmethod
    def build(cls, input_dim, horizon, widths, scaler, seed=0):
        rng = np.random.default_rng(seed)
        dims = [input_dim, *widths, horizon * len(MLP_LEVELS)]
        params = {}
        for i in range(len(dims) - 1):
            bound = 1.0 / np.sqrt(dims[i])
            params[f"mlp.{i}.W"] = rng.uniform(-bound, bound, (dims[i], dims[i + 1]))
            params[f"mlp.{i}.b"] = np.zeros(dims[i + 1])
        return cls(tuple(widths), params, scaler, horizon)

    @staticmethod
    def features(data):
        return np.concatenate([data.context.reshape(len(data), -1), data.future.reshape(len(data), -1)], axis=1)

    def forward(self, params, data):
        x = self.features(data)
        n_layers = len(self.widths) + 1
        for i in range(n_layers):
            x = ad.add(ad.matmul(x, params[f"mlp.{i}.W"]), params[f"mlp.{i}.b"])
            if i < n_layers - 1:
                x = ad.relu(x)
        return ad.reshape(x, (len(data), self.horizon, len(self.levels)))

    def quantiles_scaled(self, data, params=None):
        return np.asarray(self.forward(self.params if params is None else params, data))

    def sample_scaled(self, data, m, seed, params=None):
        """Scenarios by drawing a level per step and interpolating the quantiles.

        Predicted quantiles are sorted first so the lookup is a valid inverse
        CDF; outside [0.05, 0.95] the end values are held.
        """
        q = np.sort(self.quantiles_scaled(data, params), axis=-1)
        rng = np.random.default_rng(seed)
        u = rng.random((len(data), m, self.horizon))
        lv = np.asarray(self.levels)
        # piecewise linear lookup per (window, step)
        pos = np.clip(np.searchsorted(lv, u, side="right") - 1, 0, len(lv) - 2)
        lo, hi = lv[pos], lv[pos + 1]
        w = np.clip((u - lo) / (hi - lo), 0.0, 1.0)
        qt = np.broadcast_to(q[:, None], (len(data), m, self.horizon, len(lv)))
        ql = np.take_along_axis(qt, pos[..., None], axis=-1)[..., 0]
        qh = np.take_along_axis(qt, pos[..., None] + 1, axis=-1)[..., 0]
        return ql + w * (qh - ql)

    def sample(self, data, m, seed, chunk=0):
        return self.scaler.inverse(self.sample_scaled(data, m, seed))

    def validation_score(self, data, cfg, params=None):
        params = self.params if params is None else params
        g = Graph()
        node = pinball_node(self.forward(g.params_from(params), data), data.target, self.levels)
        return float(node.value)


def train_mlp(model, train, val, cfg, log=None):
    rng = np.random.default_rng(cfg.seed)
    params = model.params
    state = AdamState.for_params(params, lr=cfg.lr)
    best_val = model.validation_score(val, cfg, params)
    best, best_epoch = params, 0
    model.history = [{"epoch": 0, "train": None, "val": best_val}]
    n = len(train)
    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(n)
        losses = []
        for start in range(0, n, cfg.batch_size):
            batch = train.batch(order[start:start + cfg.batch_size])
            graph = Graph()
            loss = pinball_node(model.forward(graph.params_from(params), batch), batch.target, model.levels)
            _finite_or_raise(loss.value, epoch)
            grads = backward(graph, loss)
            params, state = adam_step(state, params, grads)
            losses.append(float(loss.value))
        val_score = model.validation_score(val, cfg, params)
        _finite_or_raise(val_score, epoch)
        model.history.append({"epoch": epoch, "train": float(np.mean(losses)), "val": val_score})
        if log:
            log(f"epoch {epoch}: train {np.mean(losses):.5f} val {val_score:.5f}")
        if val_score < best_val:
            best, best_val, best_epoch = params, val_score, epoch
        elif epoch - best_epoch >= cfg.patience:
            break
    model.params = best
    return model


MLP_GRID = tuple((w,) * k for k in (2, 3, 4) for w in (100, 250))


def select_mlp(train, val, horizon, scaler, cfg, grid=MLP_GRID, log=None):
    """Train one MLP per grid entry and keep the best validation loss."""
    input_dim = MlpQuantileForecaster.features(train.batch(slice(0, 1))).shape[1]
    best = None
    for widths in grid:
        model = MlpQuantileForecaster.build(input_dim, horizon, widths, scaler, seed=cfg.seed)
        train_mlp(model, train, val, cfg, log)
        score = min(h["val"] for h in model.history)
        if log:
            log(f"mlp {widths}: best val {score:.5f}")
        if best is None or score < best[0]:
            best = (score, model)
    return best[1]
