"""Command implementations shared by the CLI and the tests.

Every command reads and writes files under ``cfg.out_dir``:

- ``hourly.csv``, ``features.csv``: ingested series and covariates
- ``models/<series>.json``: one base model per series
- ``scenarios/<partition>/<origin>.csv``: sampled scenarios per origin
- ``reconciler/<mode>.json`` and ``reconciler/Q_<mode>.csv``
- ``report.json``, ``report.csv``, ``per_step.csv``: evaluation
- ``sweep.csv``, ``cdf.csv``: activation sweep
"""

import glob
import itertools
import logging
import os
from dataclasses import dataclass

import numpy as np
import pandas as pd

from .data import (CALENDAR_COLUMNS, FEATURE_NAMES, MinMaxScaler, SplitSpec, TimeSeriesFrame,
                   aggregate_sessions, build_features, make_windows, read_holidays, read_sessions,
                   split_dataset, weather_provider)
from .errors import CoherentcastError, ConfigurationError
from .io import (load_model, load_reconciler, read_scenarios, save_model, save_reconciler, write_cdf_dump,
                 write_matrix_csv, write_scenarios)
from .metrics import evaluate_methods, interval_bounds
from .models import Dataset, PicnnForecaster, TrainConfig, select_mlp, train_picnn
from .picnn import quantile
from .reconcile import (Hierarchy, ReconcilerParams, ReconcilerTrainConfig, coef_weight, reconcile_batch,
                        reconciled_energy, train_reconciler)

log = logging.getLogger("coherentcast")

FORECAST_PARTITIONS = ("base_val", "test")


class ScenarioShapeError(CoherentcastError):
    """Scenario files disagree with the actuals they are scored against."""


def _path(cfg, *parts):
    return os.path.join(cfg.out_dir, *parts)


# ---------------------------------------------------------------------------
# ingest


def cmd_ingest(cfg):
    for key in ("sessions", "weather"):
        src = getattr(cfg, key)
        if not src.startswith(("http://", "https://")) and not os.path.exists(src):
            raise FileNotFoundError(src)
    records = read_sessions(cfg.sessions)
    frame = aggregate_sessions(records, cfg.clock_start or None, cfg.clock_end or None)
    holidays = read_holidays(cfg.holidays) if cfg.holidays else set()
    weather = weather_provider(cfg.weather).load()
    feats = build_features(frame.timestamps, weather, holidays)
    os.makedirs(cfg.out_dir, exist_ok=True)
    frame.to_csv(_path(cfg, "hourly.csv"))
    fdf = pd.DataFrame(feats, index=frame.timestamps, columns=list(FEATURE_NAMES))
    fdf.index.name = "timestamp"
    fdf.to_csv(_path(cfg, "features.csv"), date_format="%Y-%m-%dT%H:%M", float_format="%.17g")
    summary = {"sessions": len(records), "hours": len(frame.timestamps), "stations": len(frame.stations)}
    print(f"ingested {summary['sessions']} sessions into {summary['hours']} hourly rows "
          f"for {summary['stations']} stations")
    return summary


# ---------------------------------------------------------------------------
# prepared data


def resolve_boundary(value, timestamps):
    """ISO timestamp, or a fraction of the hourly range floored to midnight."""
    value = str(value).strip()
    try:
        frac = float(value)
    except ValueError:
        return pd.Timestamp(value)
    if not 0.0 < frac < 1.0:
        raise ConfigurationError(f"split fraction must lie in (0, 1), got {frac}")
    return timestamps[int(frac * len(timestamps))].floor("D")


@dataclass
class Prepared:
    cfg: object
    frame: TimeSeriesFrame
    values: np.ndarray  # (T, S) ordered [total, stations...]
    features: np.ndarray  # (T, 9)
    spec: SplitSpec
    target_scalers: list
    feature_scaler: MinMaxScaler
    origins: pd.DatetimeIndex
    parts: dict  # partition -> window indices (stride 1)

    @property
    def series(self):
        return self.frame.series_names

    @property
    def hierarchy(self):
        return Hierarchy.single_level(len(self.frame.stations))

    def windows(self, s):
        y = self.target_scalers[s].transform(self.values[:, s])
        x = self.feature_scaler.transform(self.features)
        cal = [FEATURE_NAMES.index(c) for c in CALENDAR_COLUMNS]
        return make_windows(y, x, self.frame.timestamps, self.cfg.context, self.cfg.horizon,
                            future_columns=cal if self.cfg.use_future_calendar else [])

    def forecast_index(self, part):
        """Window indices of forecast origins in a partition.

        Validation origins are spaced ``val_origin_stride`` hours apart, all
        others ``origin_stride`` hours.
        """
        idx = self.parts[part]
        stride = self.cfg.val_origin_stride if part == "base_val" else self.cfg.origin_stride
        return idx[::stride]

    def dataset(self, s, idx, windows=None):
        ws = windows if windows is not None else self.windows(s)
        return Dataset(ws.context[idx], ws.future[idx], ws.target[idx][..., 0])

    def actuals(self, idx):
        """``(O, S, tau)`` kWh targets for window indices."""
        t0 = self.cfg.context + np.asarray(idx)
        steps = t0[:, None] + np.arange(self.cfg.horizon)[None]
        return self.values[steps].transpose(0, 2, 1)


def prepare(cfg):
    hourly, feats = _path(cfg, "hourly.csv"), _path(cfg, "features.csv")
    for p in (hourly, feats):
        if not os.path.exists(p):
            raise FileNotFoundError(f"{p} (run ingest first)")
    frame = TimeSeriesFrame.read_csv(hourly)
    fdf = pd.read_csv(feats, parse_dates=["timestamp"], index_col="timestamp")
    features = fdf[list(FEATURE_NAMES)].to_numpy(dtype=np.float64)
    values = frame.hierarchy_matrix()
    ts = frame.timestamps
    spec = SplitSpec(resolve_boundary(cfg.train_end, ts), resolve_boundary(cfg.val_end, ts), cfg.reconciler_fraction)
    train_rows = ts < spec.train_end
    if not train_rows.any():
        raise ConfigurationError("no training rows before train_end")
    target_scalers = [MinMaxScaler.fit(values[train_rows, s]) for s in range(values.shape[1])]
    fs = MinMaxScaler.fit(features[train_rows])
    # calendar columns are already bounded; leave them unscaled
    for c in CALENDAR_COLUMNS:
        j = FEATURE_NAMES.index(c)
        fs.lo[j], fs.hi[j] = 0.0, 1.0
    prep = Prepared(cfg, frame, values, features, spec, target_scalers, fs, None, None)
    ws = make_windows(values[:, :1], features, ts, cfg.context, cfg.horizon)
    _, idx = split_dataset(ws, spec)
    prep.origins = ws.origins
    prep.parts = idx
    return prep


def _train_config(cfg, s):
    return TrainConfig(batch_size=cfg.batch_size, lr=cfg.lr, max_epochs=cfg.max_epochs, patience=cfg.patience,
                       train_samples=cfg.train_samples, val_samples=cfg.val_samples, beta=cfg.beta,
                       seed=cfg.seed * 1000 + s)


def _build_picnn(cfg, prep, activations, s):
    ws_dim = 1 + len(FEATURE_NAMES)
    fut = len(CALENDAR_COLUMNS) if cfg.use_future_calendar else 0
    return PicnnForecaster.build(ws_dim, cfg.horizon, fut, prep.target_scalers[s], hidden=cfg.lstm_hidden,
                                 layers=cfg.lstm_layers, picnn_hidden=cfg.picnn_hidden, activations=activations,
                                 u_activation=cfg.u_activation, use_future=cfg.use_future_calendar,
                                 seed=cfg.seed * 1000 + s)


def _log(prefix):
    return lambda msg: log.info("%s %s", prefix, msg)


# ---------------------------------------------------------------------------
# base models


def cmd_train_base(cfg):
    prep = prepare(cfg)
    paths = []
    for s, name in enumerate(prep.series):
        ws = prep.windows(s)
        train = prep.dataset(s, prep.parts["base_train"][:: cfg.train_stride], ws)
        val = prep.dataset(s, prep.parts["base_val"], ws)
        tcfg = _train_config(cfg, s)
        if cfg.model_kind == "lstm-picnn":
            model = _build_picnn(cfg, prep, cfg.activations, s)
            train_picnn(model, train, val, tcfg, _log(name))
        else:
            model = select_mlp(train, val, cfg.horizon, prep.target_scalers[s], tcfg, log=_log(name))
        path = _path(cfg, "models", f"{name}.json")
        save_model(model, path, name, cfg.snapshot(),
                   {"feature_lo": prep.feature_scaler.lo.tolist(), "feature_hi": prep.feature_scaler.hi.tolist()})
        best = min(h["val"] for h in model.history)
        print(f"{name}: {len(model.history) - 1} epochs, best validation {best:.6f} -> {path}")
        paths.append(path)
    return paths


def load_models(cfg, series):
    return [load_model(_path(cfg, "models", f"{name}.json"))[0] for name in series]


# ---------------------------------------------------------------------------
# scenarios


def sample_partition(cfg, prep, models, part, m):
    """``(O, m, S, tau)`` kWh scenarios for the forecast origins of a partition."""
    idx = prep.forecast_index(part)
    out = []
    for s, model in enumerate(models):
        data = prep.dataset(s, idx)
        seed = np.random.SeedSequence([cfg.seed, s, FORECAST_PARTITIONS.index(part)])
        out.append(model.sample(data, m, seed.generate_state(1)[0], chunk=250))
    scen = np.stack(out, axis=2)
    if cfg.pairing == "random":
        rng = np.random.default_rng([cfg.seed, 17])
        for o in range(scen.shape[0]):
            for s in range(scen.shape[2]):
                scen[o, :, s] = scen[o, rng.permutation(m), s]
    return idx, scen


def cmd_forecast(cfg, partitions=FORECAST_PARTITIONS):
    prep = prepare(cfg)
    models = load_models(cfg, prep.series)
    written = []
    for part in partitions:
        idx, scen = sample_partition(cfg, prep, models, part, cfg.scenarios)
        folder = _path(cfg, "scenarios", part)
        os.makedirs(folder, exist_ok=True)
        for old in glob.glob(os.path.join(folder, "*.csv")):
            os.remove(old)
        for k, i in enumerate(idx):
            origin = prep.origins[i]
            path = os.path.join(folder, origin.strftime("%Y%m%dT%H") + ".csv")
            write_scenarios(path, scen[k], origin, cfg.seed, prep.series, part)
            written.append(path)
        print(f"{part}: {len(idx)} origins, shape {list(scen.shape[1:])} per origin")
    return written


def load_partition_scenarios(cfg, prep, part):
    """Scenario files of a partition as ``(O, m, S, tau)`` plus matching actuals."""
    files = sorted(glob.glob(_path(cfg, "scenarios", part, "*.csv")))
    if not files:
        raise FileNotFoundError(_path(cfg, "scenarios", part))
    pos = {t: k for k, t in enumerate(prep.origins)}
    scen, idx = [], []
    for f in files:
        samples, header = read_scenarios(f)
        origin = pd.Timestamp(header["origin"])
        if origin not in pos:
            raise ScenarioShapeError(f"{f}: origin {origin} is not a window origin")
        if header["series"] != list(prep.series):
            raise ScenarioShapeError(f"{f}: series {header['series']} do not match {list(prep.series)}")
        scen.append(samples)
        idx.append(pos[origin])
    shapes = {s.shape for s in scen}
    if len(shapes) != 1:
        raise ScenarioShapeError(f"{part}: scenario files have differing shapes {sorted(shapes)}")
    scen = np.stack(scen)
    actual = prep.actuals(idx)
    if scen.shape[2:] != actual.shape[1:]:
        raise ScenarioShapeError(f"{part}: scenarios {scen.shape[1:]} do not match actuals {actual.shape[1:]}")
    return scen, actual, np.array(idx)


# ---------------------------------------------------------------------------
# reconciler


def _reconciler_config(cfg):
    return ReconcilerTrainConfig(lr=cfg.dcl_lr, epochs=cfg.dcl_epochs, batch_origins=cfg.dcl_batch_origins,
                                 train_scenarios=cfg.dcl_train_scenarios, val_scenarios=cfg.dcl_val_scenarios,
                                 beta=cfg.beta, seed=cfg.seed)


def cmd_train_reconciler(cfg, mode=None):
    mode = mode or cfg.weight_mode
    prep = prepare(cfg)
    hier = prep.hierarchy
    scen, actual, _ = load_partition_scenarios(cfg, prep, "base_val")
    cut = int(round(cfg.reconciler_fraction * len(scen)))
    if cut == 0 or cut == len(scen):
        raise ConfigurationError(f"dcl_train/dcl_val split of {len(scen)} origins leaves a partition empty")
    tr_s, tr_a, va_s, va_a = scen[:cut], actual[:cut], scen[cut:], actual[cut:]
    history = []
    if mode == "id":
        params = ReconcilerParams.identity(hier.size)
    elif mode == "coef":
        # errors of the scenario-mean point forecast over the whole validation partition
        err = (scen.mean(axis=1) - actual).transpose(0, 2, 1).reshape(-1, hier.size)
        params = ReconcilerParams.from_weight(coef_weight(err))
    else:
        params, history = train_reconciler(tr_s, tr_a, va_s, va_a, hier, _reconciler_config(cfg),
                                           _log("reconciler"))
    val_score = reconciled_energy(va_s, va_a, params, hier, cfg.beta)
    id_score = reconciled_energy(va_s, va_a, ReconcilerParams.identity(hier.size), hier, cfg.beta)
    folder = _path(cfg, "reconciler")
    save_reconciler(params, os.path.join(folder, f"{mode}.json"), mode, history,
                    {"dcl_val_energy": val_score, "dcl_val_energy_identity": id_score})
    write_matrix_csv(params.Q, os.path.join(folder, f"Q_{mode}.csv"), list(prep.series))
    print(f"{mode}: dcl_val energy {val_score:.6f} (identity {id_score:.6f})")
    return params


# ---------------------------------------------------------------------------
# evaluation


def reconcile_scenarios(scen, params, hier):
    O, m, S, tau = scen.shape
    flat = scen.transpose(0, 1, 3, 2).reshape(-1, S)
    X, _ = reconcile_batch(flat, params, hier)
    return X.reshape(O, m, tau, S).transpose(0, 1, 3, 2)


def cmd_evaluate(cfg):
    prep = prepare(cfg)
    hier = prep.hierarchy
    scen, actual, idx = load_partition_scenarios(cfg, prep, "test")
    methods = {"original": scen}
    for mode in ("id", "coef", "dcl"):
        path = _path(cfg, "reconciler", f"{mode}.json")
        if os.path.exists(path):
            params, _ = load_reconciler(path)
            if params.Q_r.shape[0] != hier.size:
                raise ScenarioShapeError(f"{path}: weight size {params.Q_r.shape[0]} != {hier.size} series")
            methods[mode] = reconcile_scenarios(scen, params, hier)
    report = evaluate_methods(methods, actual, list(prep.series), beta=cfg.beta)
    report.to_json(_path(cfg, "report.json"))
    report.to_csv(_path(cfg, "report.csv"))
    _write_per_step(cfg, prep, methods, actual, idx)
    for label in methods:
        es = report.energy[label]
        print(f"{label}: mean energy score {es.mean():.6f}, max coherency gap {report.coherency[label]:.3g}")
    if "energy" in report.anova:
        a = report.anova["energy"]
        print(f"ANOVA across methods: F={a.F:.4g} p={a.p:.4g}")
    return report, methods, actual


def _write_per_step(cfg, prep, methods, actual, idx):
    rows = []
    tau = cfg.horizon
    for label, scen in methods.items():
        mean = scen.mean(axis=1)
        lo, hi = interval_bounds(scen.transpose(1, 0, 2, 3), 0.8)
        for k, i in enumerate(idx):
            origin = prep.origins[i]
            for s, name in enumerate(prep.series):
                for t in range(tau):
                    rows.append((label, origin + pd.Timedelta(hours=t), name, actual[k, s, t],
                                 mean[k, s, t], lo[k, s, t], hi[k, s, t]))
    df = pd.DataFrame(rows, columns=["method", "timestamp", "series", "actual", "mean", "lower80", "upper80"])
    df.to_csv(_path(cfg, "per_step.csv"), index=False, float_format="%.8g")


# ---------------------------------------------------------------------------
# activation sweep


def activation_combinations(depths=(2, 3, 4)):
    return ["".join(c) for d in depths for c in itertools.product("gr", repeat=d)]


def cdf_curve(model, data, grid=None):
    """``q_0`` as the first level varies over ``grid``; the others sit at 0.5."""
    grid = np.linspace(0.01, 0.99, 99) if grid is None else grid
    alpha = np.full((1, len(grid), model.horizon), 0.5)
    alpha[0, :, 0] = grid
    h = model.condition(model.params, data.batch(slice(0, 1)))
    q = np.asarray(quantile(model.params, model.picnn, alpha, h))[0, :, 0]
    return grid, q


def cmd_sweep_activations(cfg):
    prep = prepare(cfg)
    depths = tuple(int(d) for d in cfg.sweep_depths.split(","))
    if cfg.sweep_series not in prep.series:
        raise ConfigurationError(f"sweep_series {cfg.sweep_series!r} not in {list(prep.series)}")
    s = prep.series.index(cfg.sweep_series)
    ws = prep.windows(s)
    train = prep.dataset(s, prep.parts["base_train"][:: cfg.train_stride], ws)
    val = prep.dataset(s, prep.parts["base_val"], ws)
    val_origins = prep.dataset(s, prep.forecast_index("base_val"), ws)
    tcfg = _train_config(cfg, s)
    tcfg.max_epochs = min(cfg.sweep_max_epochs, cfg.max_epochs)
    rows, curves = [], {}
    for code in activation_combinations(depths):
        model = _build_picnn(cfg, prep, code, s)
        train_picnn(model, train, val, tcfg, _log(f"sweep {code}"))
        scen = model.sample(val_origins, cfg.val_samples, cfg.seed)
        actual = model.scaler.inverse(val_origins.target)
        mae = float(np.mean(np.abs(scen.mean(axis=1) - actual)))
        curves[code] = cdf_curve(model, val_origins)
        rows.append({"combination": code, "depth": len(code), "val_mae": mae, "epochs": len(model.history) - 1})
        print(f"{code}: validation MAE {mae:.6f}")
    pd.DataFrame(rows).to_csv(_path(cfg, "sweep.csv"), index=False, float_format="%.10g")
    write_cdf_dump(curves, _path(cfg, "cdf.csv"))
    return rows, curves
