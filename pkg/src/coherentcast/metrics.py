"""Point, quantile, interval and distributional forecast metrics, plus one-way ANOVA."""

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import betainc

from .energy import energy_score_flat, energy_score_per_step
from .errors import ContractViolation

# MASE with a zero naive error is undefined rather than infinite
UNDEFINED = None
QL_LEVELS = tuple(round(0.1 * k, 1) for k in range(1, 10))
WS_LEVELS = (0.6, 0.8)
MASE_LAGS = (24, 168)


def _pair(actual, predicted):
    a = np.asarray(actual, dtype=np.float64).reshape(-1)
    p = np.asarray(predicted, dtype=np.float64).reshape(-1)
    if a.shape != p.shape:
        raise ContractViolation(f"length mismatch: {a.size} actual vs {p.size} predicted")
    if a.size == 0:
        raise ContractViolation("empty series")
    return a, p


def mae(actual, predicted):
    a, p = _pair(actual, predicted)
    return float(np.mean(np.abs(a - p)))


def rmse(actual, predicted):
    a, p = _pair(actual, predicted)
    return float(np.sqrt(np.mean((a - p) ** 2)))


def mase(actual, predicted, lag):
    """Model error over naive-lag error, both summed over steps ``t >= lag``.

    Returns :data:`UNDEFINED` when the naive error is zero.
    """
    a, p = _pair(actual, predicted)
    if a.size <= lag:
        raise ContractViolation(f"MASE({lag}) needs more than {lag} points, got {a.size}")
    naive = np.abs(a[lag:] - a[:-lag]).sum()
    if naive == 0.0:
        return UNDEFINED
    return float(np.abs(a[lag:] - p[lag:]).sum() / naive)


def point_metrics(actual, predicted, lags=MASE_LAGS):
    out = {"MAE": mae(actual, predicted), "RMSE": rmse(actual, predicted)}
    n = np.size(actual)
    for lag in lags:
        out[f"MASE({lag})"] = mase(actual, predicted, lag) if n > lag else UNDEFINED
    return out


def _check_level(alpha):
    if not 0.0 < alpha < 1.0:
        raise ContractViolation(f"level must lie in (0, 1), got {alpha}")


def quantile_loss(actual, predicted, alpha):
    """Mean pinball loss of a quantile-``alpha`` forecast."""
    _check_level(alpha)
    a, p = _pair(actual, predicted)
    d = a - p
    return float(np.mean(np.maximum(alpha * d, (alpha - 1.0) * d)))


def winkler(actual, lower, upper, alpha):
    """Mean Winkler score of central ``alpha`` intervals ``[lower, upper]``."""
    _check_level(alpha)
    a, lo = _pair(actual, lower)
    _, hi = _pair(actual, upper)
    if np.any(lo > hi):
        raise ContractViolation("lower bound exceeds upper bound")
    pen = 2.0 / (1.0 - alpha)
    score = (hi - lo) + pen * np.maximum(lo - a, 0.0) + pen * np.maximum(a - hi, 0.0)
    return float(np.mean(score))


def scenario_quantiles(scenarios, levels):
    """Empirical quantiles over the sample axis 0 (linear interpolation)."""
    return np.quantile(np.asarray(scenarios, dtype=np.float64), levels, axis=0)


def interval_bounds(scenarios, alpha):
    lo, hi = scenario_quantiles(scenarios, [(1.0 - alpha) / 2.0, (1.0 + alpha) / 2.0])
    return lo, hi


def f_sf(f, d1, d2):
    """Upper tail of the F distribution via the regularized incomplete beta."""
    if math.isinf(f):
        return 0.0
    if f <= 0.0:
        return 1.0
    x = d2 / (d2 + d1 * f)
    return float(betainc(d2 / 2.0, d1 / 2.0, x))


def _anova(groups):
    groups = [np.asarray(g, dtype=np.float64).reshape(-1) for g in groups]
    if len(groups) < 2:
        raise ContractViolation("ANOVA needs at least two groups")
    if any(g.size < 2 for g in groups):
        raise ContractViolation("every ANOVA group needs at least two observations")
    k = len(groups)
    n = sum(g.size for g in groups)
    # centre on the grand mean first so adding a constant changes nothing
    grand = np.concatenate(groups).mean()
    groups = [g - grand for g in groups]
    means = [g.mean() for g in groups]
    ssb = sum(g.size * m * m for g, m in zip(groups, means))
    ssw = sum(((g - m) ** 2).sum() for g, m in zip(groups, means))
    d1, d2 = k - 1, n - k
    msb, msw = ssb / d1, ssw / d2
    scale = max(1.0, max(np.abs(g).max() for g in groups)) ** 2
    if msw <= 1e-28 * scale:
        if msb <= 1e-28 * scale:
            return 0.0, 1.0
        return math.inf, 0.0
    f = float(msb / msw)
    return f, f_sf(f, d1, d2)


@dataclass
class AnovaResult:
    F: float
    p: float
    pairwise: dict = field(default_factory=dict)  # "i|j" -> (F, p)


def anova_oneway(groups, labels=None):
    """One-way ANOVA across ``groups`` plus every pairwise test."""
    labels = list(labels) if labels is not None else [str(i) for i in range(len(groups))]
    F, p = _anova(groups)
    pairs = {}
    for i in range(len(groups)):
        for j in range(i + 1, len(groups)):
            pairs[f"{labels[i]}|{labels[j]}"] = _anova([groups[i], groups[j]])
    return AnovaResult(F, p, pairs)


def _json_num(v):
    if v is None:
        return None
    if isinstance(v, float) and math.isinf(v):
        return "inf"
    return v


def _series_row(actual, scenarios, lags):
    """Metrics for one series: ``scenarios`` ``(m, T)``, ``actual`` ``(T,)``."""
    row = point_metrics(actual, scenarios.mean(axis=0), lags)
    qs = scenario_quantiles(scenarios, list(QL_LEVELS))
    for lvl, q in zip(QL_LEVELS, qs):
        row[f"QL({lvl:g})"] = quantile_loss(actual, q, lvl)
    for lvl in WS_LEVELS:
        lo, hi = interval_bounds(scenarios, lvl)
        row[f"WS({lvl:g})"] = winkler(actual, lo, hi, lvl)
    return row


@dataclass
class EvalReport:
    rows: list = field(default_factory=list)  # dicts with method, series and metric columns
    energy: dict = field(default_factory=dict)  # method -> per-interval energy scores
    energy_flat: dict = field(default_factory=dict)  # method -> per-origin flattened scores
    anova: dict = field(default_factory=dict)
    coherency: dict = field(default_factory=dict)  # method -> max |y - sum z|

    def to_json(self, path):
        data = {
            "rows": [{k: _json_num(v) for k, v in r.items()} for r in self.rows],
            "energy": {k: [float(x) for x in v] for k, v in self.energy.items()},
            "energy_mean": {k: float(np.mean(v)) for k, v in self.energy.items()},
            "energy_flat": {k: [float(x) for x in v] for k, v in self.energy_flat.items()},
            "anova": {k: {"F": _json_num(a.F), "p": a.p,
                          "pairwise": {pk: {"F": _json_num(f), "p": pv} for pk, (f, pv) in a.pairwise.items()}}
                      for k, a in self.anova.items()},
            "coherency": self.coherency,
        }
        with open(path, "w") as fh:
            json.dump(data, fh, indent=2)

    def to_csv(self, path):
        cols = []
        for r in self.rows:
            cols += [k for k in r if k not in cols]
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=cols)
            w.writeheader()
            for r in self.rows:
                w.writerow({k: ("undefined" if r.get(k, "") is None else r.get(k, "")) for k in cols})


def evaluate_methods(methods, actual, series_names, lags=MASE_LAGS, beta=1.0):
    """Score scenario sets from several methods against the same actuals.

    ``methods`` maps a label to scenarios ``(O, m, S, tau)``; ``actual`` is
    ``(O, S, tau)``. Per-series metrics pool all origins and horizon steps in
    time order. The energy score is computed for every forecast interval
    (one origin and step, over the cross-sectional vector); those series feed
    the ANOVA. The flattened per-origin variant is reported alongside.
    """
    actual = np.asarray(actual, dtype=np.float64)
    report = EvalReport()
    for label, scen in methods.items():
        scen = np.asarray(scen, dtype=np.float64)
        if scen.shape[0] != actual.shape[0] or scen.shape[2:] != actual.shape[1:]:
            raise ContractViolation(f"{label}: scenarios {scen.shape} do not match actuals {actual.shape}")
        O, m, S, tau = scen.shape
        for s, name in enumerate(series_names):
            a = actual[:, s].reshape(-1)
            sc = scen[:, :, s].transpose(1, 0, 2).reshape(m, -1)
            row = {"method": label, "series": name}
            row.update(_series_row(a, sc, lags))
            report.rows.append(row)
        report.energy[label] = np.concatenate([energy_score_per_step(scen[o], actual[o], beta) for o in range(O)])
        report.energy_flat[label] = np.array([energy_score_flat(scen[o], actual[o], beta) for o in range(O)])
        gap = np.abs(scen[:, :, 0] - scen[:, :, 1:].sum(axis=2)).max() if S > 1 else 0.0
        report.coherency[label] = float(gap)
    labels = list(methods)
    if len(labels) >= 2 and actual.shape[0] * actual.shape[2] >= 2:
        report.anova["energy"] = anova_oneway([report.energy[k] for k in labels], labels)
    return report
