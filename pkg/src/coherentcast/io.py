"""Artifact and scenario file formats.

Model and reconciler artifacts are JSON documents whose arrays are stored as
``{"shape": [...], "data": [...]}``. Python writes floats with ``repr`` so
loading reproduces every parameter bitwise.

Scenario files hold one forecast origin: a JSON header line followed by a CSV
body with one row per ``(sample, series)`` and one column per horizon step.
"""

import json
import os

import numpy as np
import pandas as pd

from .data import MinMaxScaler
from .errors import ConfigurationError
from .lstm import LstmConfig
from .models import MlpQuantileForecaster, PicnnForecaster
from .picnn import PicnnConfig
from .reconcile import ReconcilerParams

FORMAT_VERSION = 1


def pack(a):
    a = np.asarray(a, dtype=np.float64)
    return {"shape": list(a.shape), "data": a.reshape(-1).tolist()}


def unpack(d):
    return np.array(d["data"], dtype=np.float64).reshape(d["shape"])


def _dump(doc, path):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True)


def _load(path, kind):
    if not os.path.exists(path):
        raise ConfigurationError(f"missing artifact: {path}")
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != kind or doc.get("version") != FORMAT_VERSION:
        raise ConfigurationError(f"{path}: not a version {FORMAT_VERSION} {kind} artifact")
    return doc


def save_model(model, path, series, config=None, extra=None):
    doc = {
        "format": "coherentcast-model",
        "version": FORMAT_VERSION,
        "kind": model.kind,
        "series": series,
        "params": {k: pack(v) for k, v in sorted(model.params.items())},
        "scaler": {"lo": pack(model.scaler.lo), "hi": pack(model.scaler.hi)},
        "history": model.history,
        "config": config or {},
        "extra": extra or {},
    }
    if model.kind == "lstm-picnn":
        doc["lstm"] = {"input_size": model.lstm.input_size, "hidden_size": model.lstm.hidden_size,
                       "num_layers": model.lstm.num_layers}
        p = model.picnn
        doc["picnn"] = {"alpha_dim": p.alpha_dim, "context_dim": p.context_dim, "hidden": p.hidden,
                        "activations": p.activations, "u_activation": p.u_activation, "out_width": p.out_width}
        doc["use_future"] = model.use_future
    else:
        doc["mlp"] = {"widths": list(model.widths), "horizon": model.horizon, "levels": list(model.levels)}
    _dump(doc, path)


def load_model(path):
    """Returns ``(model, doc)``."""
    doc = _load(path, "coherentcast-model")
    params = {k: unpack(v) for k, v in doc["params"].items()}
    scaler = MinMaxScaler(unpack(doc["scaler"]["lo"]), unpack(doc["scaler"]["hi"]))
    if doc["kind"] == "lstm-picnn":
        model = PicnnForecaster(LstmConfig(**doc["lstm"]), PicnnConfig(**doc["picnn"]), params, scaler,
                                doc["use_future"], doc["history"])
    elif doc["kind"] == "mlp-qr":
        m = doc["mlp"]
        model = MlpQuantileForecaster(tuple(m["widths"]), params, scaler, m["horizon"], tuple(m["levels"]),
                                      doc["history"])
    else:
        raise ConfigurationError(f"{path}: unknown model kind {doc['kind']!r}")
    return model, doc


def save_reconciler(params, path, mode, history=None, config=None):
    _dump({"format": "coherentcast-reconciler", "version": FORMAT_VERSION, "mode": mode,
           "Q_r": pack(params.Q_r), "history": history or [], "config": config or {}}, path)


def load_reconciler(path):
    doc = _load(path, "coherentcast-reconciler")
    return ReconcilerParams(unpack(doc["Q_r"])), doc


def write_matrix_csv(M, path, labels):
    df = pd.DataFrame(np.asarray(M), index=labels, columns=labels)
    df.to_csv(path, float_format="%.17g")


def write_scenarios(path, samples, origin, seed, series, partition):
    """``samples`` ``(m, S, tau)`` in kWh."""
    m, S, tau = samples.shape
    header = {"shape": [m, S, tau], "origin": pd.Timestamp(origin).isoformat(), "seed": int(seed),
              "series": list(series), "partition": partition}
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w") as fh:
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        fh.write("sample,series," + ",".join(f"h{t + 1}" for t in range(tau)) + "\n")
        rows = samples.reshape(m * S, tau)
        for k, row in enumerate(rows):
            fh.write(f"{k // S},{series[k % S]}," + ",".join(f"{v:.8g}" for v in row) + "\n")


def read_scenarios(path):
    """Returns ``(samples, header)``."""
    with open(path) as fh:
        header = json.loads(fh.readline())
        body = pd.read_csv(fh)
    m, S, tau = header["shape"]
    values = body[[f"h{t + 1}" for t in range(tau)]].to_numpy(dtype=np.float64)
    if values.shape != (m * S, tau):
        raise ConfigurationError(f"{path}: body does not match declared shape {header['shape']}")
    return values.reshape(m, S, tau), header


def write_cdf_dump(curves, path):
    """``curves`` maps a combination code to ``(alphas, q)``."""
    with open(path, "w") as fh:
        fh.write("combination,alpha,q\n")
        for code, (alphas, q) in curves.items():
            for a, v in zip(alphas, q):
                fh.write(f"{code},{a:.6g},{v:.17g}\n")
