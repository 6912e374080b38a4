"""Differentiable reconciliation of scenario vectors onto the coherent orthant.

Vectors are ordered ``x = [aggregates..., bottom...]``; the hierarchy
constraint is ``aggregates = S @ bottom``. Reconciliation solves::

    min_x (x_hat - x)^T Q (x_hat - x)   s.t.  C x = 0,  x >= 0

with ``C = [I, -S]`` and ``Q = Q_r^T Q_r`` for a lower-triangular ``Q_r``.

Because every row of ``S`` is 0/1 and nonzero, ``bottom >= 0`` already
implies ``aggregates >= 0``; the active-set iteration therefore only moves
bottom-level bounds in and out of the working set, which keeps every KKT
matrix nonsingular. Aggregate bounds carry a zero multiplier.

Instances are solved in batches: all rows sharing a working set reuse one
cached KKT inverse.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import nnls

from .energy import check_beta, energy_score_batch, energy_score_batch_grad
from .errors import ConfigurationError, ContractViolation, NumericalError
from .optim import AdamState, adam_step

DIAG_FLOOR = 1e-6
WEAK_TOL = 1e-8


@dataclass(frozen=True)
class Hierarchy:
    S: np.ndarray

    def __post_init__(self):
        S = np.atleast_2d(np.asarray(self.S, dtype=np.float64))
        if not np.all((S == 0.0) | (S == 1.0)):
            raise ConfigurationError("summing matrix entries must be 0 or 1")
        if np.any(S.sum(axis=1) == 0):
            raise ConfigurationError("summing matrix has an all-zero row")
        S.setflags(write=False)
        object.__setattr__(self, "S", S)

    @classmethod
    def single_level(cls, n_bottom):
        return cls(np.ones((1, n_bottom)))

    @property
    def n_agg(self):
        return self.S.shape[0]

    @property
    def n_bottom(self):
        return self.S.shape[1]

    @property
    def size(self):
        return self.n_agg + self.n_bottom

    @property
    def C(self):
        return np.hstack([np.eye(self.n_agg), -self.S])

    @property
    def B(self):
        """Map from bottom values to the full coherent vector."""
        return np.vstack([self.S, np.eye(self.n_bottom)])

    def coherency_gap(self, X):
        X = np.asarray(X)
        return np.abs(X[..., : self.n_agg] - X[..., self.n_agg:] @ self.S.T).max(axis=-1)


@dataclass
class ReconcilerParams:
    Q_r: np.ndarray

    def __post_init__(self):
        Q_r = np.array(self.Q_r, dtype=np.float64)
        if Q_r.ndim != 2 or Q_r.shape[0] != Q_r.shape[1]:
            raise ConfigurationError("Q_r must be square")
        if np.any(np.triu(Q_r, 1) != 0.0):
            raise ConfigurationError("Q_r must be lower-triangular")
        self.Q_r = Q_r

    @classmethod
    def identity(cls, size):
        return cls(np.eye(size))

    @classmethod
    def from_weight(cls, Q):
        """Lower-triangular ``Q_r`` with ``Q_r^T Q_r = Q`` (flipped Cholesky)."""
        Q = np.asarray(Q, dtype=np.float64)
        L = np.linalg.cholesky(Q[::-1, ::-1])
        Q_r = L.T[::-1, ::-1].copy()
        # Cholesky diagonal is positive; flips keep it on the diagonal
        return cls(np.tril(Q_r))

    @property
    def Q(self):
        return self.Q_r.T @ self.Q_r

    def floored(self):
        Q_r = self.Q_r.copy()
        idx = np.diag_indices_from(Q_r)
        Q_r[idx] = np.maximum(Q_r[idx], DIAG_FLOOR)
        return ReconcilerParams(Q_r)

    def check(self):
        if np.any(np.diag(self.Q_r) < DIAG_FLOOR):
            raise NumericalError(f"Q_r diagonal below the floor {DIAG_FLOOR:g}; Q is not safely positive definite")


@dataclass
class QpSolution:
    x: np.ndarray
    x_hat: np.ndarray
    active: np.ndarray  # indices with a binding nonnegativity constraint
    eq_multipliers: np.ndarray
    ineq_multipliers: np.ndarray
    params: ReconcilerParams = field(repr=False)
    hierarchy: Hierarchy = field(repr=False)

    @property
    def objective(self):
        r = self.params.Q_r @ (self.x_hat - self.x)
        return float(r @ r)


class _KKTCache:
    """KKT inverses per working set for one ``(Q, hierarchy)`` pair."""

    def __init__(self, params, hier):
        params.check()
        self.hier = hier
        self.Q = params.Q
        self.size = hier.size
        self._maps = {}

    def matrix(self, working):
        size, n_agg = self.size, self.hier.n_agg
        rows = [self.hier.n_agg + j for j in np.flatnonzero(working)]
        E = np.zeros((len(rows), size))
        E[np.arange(len(rows)), rows] = 1.0
        k = size + n_agg + len(rows)
        K = np.zeros((k, k))
        K[:size, :size] = 2.0 * self.Q
        K[:size, size:size + n_agg] = self.hier.C.T
        K[size:size + n_agg, :size] = self.hier.C
        K[:size, size + n_agg:] = E.T
        K[size + n_agg:, :size] = E
        return K

    def inverse(self, working):
        key = working.tobytes()
        hit = self._maps.get(key)
        if hit is None:
            K = self.matrix(working)
            try:
                Kinv = np.linalg.inv(K)
            except np.linalg.LinAlgError as exc:
                raise NumericalError(
                    f"singular KKT system; check that the Q_r diagonal stays above {DIAG_FLOOR:g}") from exc
            if not np.all(np.isfinite(Kinv)):
                raise NumericalError(f"non-finite KKT inverse; Q_r diagonal floor is {DIAG_FLOOR:g}")
            # solution is linear in x_hat: s = Kinv[:, :size] @ (2 Q x_hat)
            hit = (Kinv, Kinv[:, : self.size] @ (2.0 * self.Q))
            self._maps[key] = hit
        return hit


def _group(working):
    keys = np.packbits(working, axis=1) if working.shape[1] else np.zeros((len(working), 1), np.uint8)
    _, inv = np.unique(keys, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    for g in range(inv.max() + 1 if len(inv) else 0):
        rows = np.flatnonzero(inv == g)
        yield rows, working[rows[0]]


def _solve_eqp(cache, X_hat, working):
    """EQP solution and bound multipliers for every row of ``X_hat``."""
    size, n_agg = cache.size, cache.hier.n_agg
    X = np.empty_like(X_hat)
    mu = np.zeros(working.shape)
    lam = np.empty((len(X_hat), n_agg))
    for rows, w in _group(working):
        _, T = cache.inverse(w)
        sol = X_hat[rows] @ T.T
        X[rows] = sol[:, :size]
        lam[rows] = sol[:, size:size + n_agg]
        # stationarity uses +E^T nu, the bound multiplier is mu = -nu
        mu_rows = np.zeros((len(rows), working.shape[1]))
        mu_rows[:, w] = -sol[:, size + n_agg:]
        mu[rows] = mu_rows
    return X, lam, mu


def reconcile_batch(X_hat, params, hier, max_iter=None, return_multipliers=False):
    """Solve the reconciliation QP for every row of ``X_hat`` ``(N, size)``.

    Returns ``(X, working)`` where ``working`` ``(N, n_bottom)`` marks the
    bottom bounds held at zero; with ``return_multipliers`` also the equality
    and bottom-bound multipliers.
    """
    X_hat = np.asarray(X_hat, dtype=np.float64)
    if X_hat.ndim != 2 or X_hat.shape[1] != hier.size:
        raise ContractViolation(f"expected (N, {hier.size}) inputs, got {X_hat.shape}")
    cache = _KKTCache(params, hier)
    n_agg, nb = hier.n_agg, hier.n_bottom
    N = len(X_hat)
    scale = 1.0 + np.abs(X_hat).max(axis=1, initial=0.0)
    tol = 1e-12 * scale

    feasible = (hier.coherency_gap(X_hat) <= tol) & (X_hat.min(axis=1, initial=0.0) >= 0.0)
    X = X_hat.copy()
    working = np.zeros((N, nb), dtype=bool)
    lam = np.zeros((N, n_agg))
    mu = np.zeros((N, nb))

    todo = np.flatnonzero(~feasible)
    if len(todo):
        # equality-only projection first: optimal whenever it is nonnegative
        Xe, le, me = _solve_eqp(cache, X_hat[todo], working[todo])
        ok = Xe[:, n_agg:].min(axis=1) >= 0.0
        X[todo[ok]], lam[todo[ok]] = Xe[ok], le[ok]
        rest = todo[~ok]
        if len(rest):
            Xr, Wr, lr, mr = _active_set(cache, X_hat[rest], tol[rest], max_iter or 20 * (nb + 1))
            X[rest], working[rest], lam[rest], mu[rest] = Xr, Wr, lr, mr
        # exact coherency and exact zeros on the working set
        fix = todo
        Xb = X[fix, n_agg:]
        Xb[working[fix]] = 0.0
        X[fix, n_agg:] = Xb
        X[fix, :n_agg] = Xb @ hier.S.T
    if return_multipliers:
        return X, working, lam, mu
    return X, working


def _active_set(cache, X_hat, tol, max_iter):
    hier = cache.hier
    n_agg, nb = hier.n_agg, hier.n_bottom
    N = len(X_hat)
    # x = 0 with every bottom bound active is feasible
    X = np.zeros_like(X_hat)
    W = np.ones((N, nb), dtype=bool)
    done = np.zeros(N, dtype=bool)
    lam = np.zeros((N, n_agg))
    mu = np.zeros((N, nb))
    for _ in range(max_iter):
        live = np.flatnonzero(~done)
        if not len(live):
            break
        Xe, le, me = _solve_eqp(cache, X_hat[live], W[live])
        P = Xe - X[live]
        still = np.abs(P).max(axis=1) <= tol[live]
        # stationary on the working set: finish or release the worst bound
        k = np.flatnonzero(still)
        if len(k):
            i = live[k]
            m = np.where(W[i], me[k], np.inf)
            j = np.argmin(m, axis=1)
            worst = m[np.arange(len(k)), j]
            fin = worst >= -tol[i]
            f = i[fin]
            done[f] = True
            X[f], lam[f] = Xe[k[fin]], le[k[fin]]
            mu[f] = np.where(W[f], np.maximum(me[k[fin]], 0.0), 0.0)
            W[i[~fin], j[~fin]] = False
        # otherwise step toward the EQP minimiser with a ratio test
        k = np.flatnonzero(~still)
        if len(k):
            i = live[k]
            pb = P[k, n_agg:]
            xb = X[i, n_agg:]
            cand = (~W[i]) & (pb < 0.0)
            ratios = np.where(cand, -xb / np.where(cand, pb, -1.0), np.inf)
            block = np.argmin(ratios, axis=1)
            r = ratios[np.arange(len(k)), block]
            blocked = r < 1.0
            step = np.where(blocked, np.maximum(r, 0.0), 1.0)
            X[i] = X[i] + step[:, None] * P[k]
            bi = i[blocked]
            X[bi, n_agg + block[blocked]] = 0.0
            W[bi, block[blocked]] = True
    if not done.all():
        # cycling guard: fall back to NNLS in bottom coordinates
        for i in np.flatnonzero(~done):
            X[i], W[i], lam[i], mu[i] = _nnls_fallback(cache, X_hat[i])
    return X, W, lam, mu


def _nnls_fallback(cache, x_hat):
    hier = cache.hier
    Q_r = np.linalg.cholesky(cache.Q).T
    z, _ = nnls(Q_r @ hier.B, Q_r @ x_hat)
    x = hier.B @ z
    W = z <= 0.0
    grad = 2.0 * cache.Q @ (x - x_hat)
    lam = -grad[: hier.n_agg]
    mu = np.where(W, np.maximum(hier.B.T @ grad, 0.0), 0.0)
    return x, W, lam, mu


def reconcile(x_hat, params, hier):
    """Reconcile one vector; returns a :class:`QpSolution`."""
    x_hat = np.asarray(x_hat, dtype=np.float64)
    X, W, lam, mu = reconcile_batch(x_hat[None], params, hier, return_multipliers=True)
    ineq = np.zeros(hier.size)
    ineq[hier.n_agg:] = mu[0]
    active = np.flatnonzero(X[0] == 0.0)
    return QpSolution(X[0], x_hat.copy(), active, lam[0], ineq, params, hier)


# ---------------------------------------------------------------------------
# cone form


@dataclass(frozen=True)
class ConeSpec:
    """Product cone ``SOC(1 + N) x {0}^N x (coherent subspace & orthant)``."""

    soc_dim: int
    zero_dim: int
    coherent_dim: int
    hierarchy: Hierarchy

    @property
    def dims(self):
        return (self.soc_dim, self.zero_dim, self.coherent_dim)

    def violation(self, s):
        """Largest constraint violation of slack vector ``s`` in the cone."""
        a, b, _ = np.cumsum(self.dims)
        soc, zero, coh = s[:a], s[a:b], s[b:]
        v_soc = max(np.linalg.norm(soc[1:]) - soc[0], 0.0)
        v_zero = np.abs(zero).max(initial=0.0)
        v_coh = max(float(self.hierarchy.coherency_gap(coh)), max(-coh.min(), 0.0))
        return max(v_soc, v_zero, v_coh)


def assemble_cone(x_hat, params, hier):
    """Cone program data ``(A, b, c, K)`` in the variable ``(eta, xi, x)``.

    ``min c^T v  s.t.  b - A v in K`` is equivalent to the reconciliation QP:
    ``xi`` is pinned to ``x_hat`` and ``eta >= |Q_r (xi - x)|``. ``A`` and
    ``b`` are affine in ``(Q_r, x_hat)``.
    """
    x_hat = np.asarray(x_hat, dtype=np.float64)
    N = hier.size
    Q_r = params.Q_r
    nv = 1 + 2 * N
    A = np.zeros((1 + N + N + N, nv))
    A[0, 0] = -1.0
    A[1:1 + N, 1:1 + N] = -Q_r
    A[1:1 + N, 1 + N:] = Q_r
    A[1 + N:1 + 2 * N, 1:1 + N] = -np.eye(N)
    A[1 + 2 * N:, 1 + N:] = -np.eye(N)
    b = np.zeros(A.shape[0])
    b[1 + N:1 + 2 * N] = -x_hat
    c = np.zeros(nv)
    c[0] = 1.0
    return A, b, c, ConeSpec(1 + N, N, N, hier)


# ---------------------------------------------------------------------------
# differentiation


def dcl_backward_batch(X, X_hat, working, G, params, hier):
    """Implicit-KKT gradients for a batch of solutions.

    ``G`` is ``dL/dX``; returns ``(dL/dQ_r, dL/dX_hat)`` with ``dL/dQ_r``
    summed over the batch and restricted to the lower triangle.

    Bounds with zero slack and a multiplier <= ``WEAK_TOL`` are weakly
    active; those rows are differentiated with every zero-slack bound held
    and a least-squares solve of the KKT system.
    """
    X = np.asarray(X, dtype=np.float64)
    X_hat = np.asarray(X_hat, dtype=np.float64)
    G = np.asarray(G, dtype=np.float64)
    cache = _KKTCache(params, hier)
    size, n_agg = hier.size, hier.n_agg
    zero_slack = X[:, n_agg:] <= WEAK_TOL
    weak = zero_slack & ~working
    if np.any(working):
        # zero multipliers on the working set also count as weak
        _, _, mu = _solve_eqp(cache, X_hat, working)
        weak |= working & (mu <= WEAK_TOL)
    hold = working | zero_slack
    Wx = np.empty_like(G)
    is_weak = weak.any(axis=1)
    for rows, w in _group(hold):
        Kinv, _ = cache.inverse(w)
        plain = rows[~is_weak[rows]]
        if len(plain):
            Wx[plain] = G[plain] @ Kinv[:size, :size].T
        wk = rows[is_weak[rows]]
        if len(wk):
            K = cache.matrix(w)
            rhs = np.zeros((K.shape[0], len(wk)))
            rhs[:size] = G[wk].T
            sol = np.linalg.lstsq(K.T, rhs, rcond=None)[0]
            Wx[wk] = sol[:size].T
    D = X_hat - X
    dX_hat = 2.0 * Wx @ cache.Q  # Q symmetric
    M = D.T @ Wx
    dQ_r = np.tril(2.0 * params.Q_r @ (M + M.T))
    return dQ_r, dX_hat


def dcl_backward(sol, upstream):
    """Gradients of ``L`` w.r.t. ``Q_r`` and ``x_hat`` given ``dL/dx*``."""
    hier = sol.hierarchy
    working = np.zeros((1, hier.n_bottom), dtype=bool)
    working[0, sol.active[sol.active >= hier.n_agg] - hier.n_agg] = True
    dQ_r, dX_hat = dcl_backward_batch(sol.x[None], sol.x_hat[None], working,
                                      np.asarray(upstream, dtype=np.float64)[None], sol.params, hier)
    return dQ_r, dX_hat[0]


# ---------------------------------------------------------------------------
# weight estimation and training


def coef_weight(errors, ridge=1e-6):
    """Inverse correlation matrix of base forecast errors ``(samples, size)``."""
    errors = np.asarray(errors, dtype=np.float64)
    corr = np.corrcoef(errors, rowvar=False)
    corr = np.nan_to_num(corr, nan=0.0)
    np.fill_diagonal(corr, 1.0)
    Q = np.linalg.inv(corr + ridge * np.eye(len(corr)))
    return 0.5 * (Q + Q.T)


def _reconcile_scenarios(scen, params, hier):
    """``scen`` ``(O, m, size, tau)`` -> reconciled array and solver state."""
    O, m, size, tau = scen.shape
    flat = scen.transpose(0, 1, 3, 2).reshape(-1, size)
    X, W = reconcile_batch(flat, params, hier)
    return flat, X, W


def scenario_energy(scen, actual, beta=1.0):
    """Mean over origins of the per-step energy score summed over the horizon.

    ``scen`` ``(O, m, size, tau)``, ``actual`` ``(O, size, tau)``.
    """
    O, m, size, tau = scen.shape
    samples = scen.transpose(0, 3, 1, 2).reshape(O * tau, m, size)
    obs = actual.transpose(0, 2, 1).reshape(O * tau, size)
    return float(energy_score_batch(samples, obs, beta).sum() / O)


def reconciled_energy(scen, actual, params, hier, beta=1.0):
    O, m, size, tau = scen.shape
    _, X, _ = _reconcile_scenarios(scen, params, hier)
    rec = X.reshape(O, m, tau, size).transpose(0, 1, 3, 2)
    return scenario_energy(rec, actual, beta)


@dataclass
class ReconcilerTrainConfig:
    lr: float = 0.01
    epochs: int = 30
    batch_origins: int = 16
    train_scenarios: int = 64
    val_scenarios: int = 200
    beta: float = 1.0
    seed: int = 0


def _subsample(rng, scen, k):
    m = scen.shape[1]
    if k >= m:
        return scen
    idx = np.sort(rng.choice(m, size=k, replace=False))
    return scen[:, idx]


def train_reconciler(train_scen, train_actual, val_scen, val_actual, hier, cfg=None, log=None):
    """Learn ``Q_r`` by Adam on the energy score of reconciled scenarios.

    Scenario arrays are ``(origins, m, size, tau)``; actuals are
    ``(origins, size, tau)``. Starts from the identity and returns
    ``(best_params, history)`` where ``best_params`` minimises the validation
    score over all epochs including the initial one.
    """
    cfg = cfg or ReconcilerTrainConfig()
    check_beta(cfg.beta)
    train_scen = np.asarray(train_scen, dtype=np.float64)
    val_scen = np.asarray(val_scen, dtype=np.float64)
    if len(train_scen) == 0:
        raise ConfigurationError("dcl_train partition is empty")
    if len(val_scen) == 0:
        raise ConfigurationError("dcl_val partition is empty")
    rng = np.random.default_rng(cfg.seed)
    val_sub = _subsample(np.random.default_rng(cfg.seed + 1), val_scen, cfg.val_scenarios)
    size = hier.size
    params = ReconcilerParams.identity(size)
    lower = np.tril(np.ones((size, size)))
    state = AdamState.for_params({"Q_r": params.Q_r}, lr=cfg.lr)

    best = params
    best_val = reconciled_energy(val_sub, val_actual, params, hier, cfg.beta)
    history = [{"epoch": 0, "train": None, "val": best_val}]
    O = len(train_scen)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(O)
        losses = []
        for start in range(0, O, cfg.batch_origins):
            idx = order[start:start + cfg.batch_origins]
            scen = _subsample(rng, train_scen[idx], cfg.train_scenarios)
            act = train_actual[idx]
            B, m, _, tau = scen.shape
            flat, X, W = _reconcile_scenarios(scen, params, hier)
            # (B, m, tau, size) -> per (origin, step) sample sets
            samples = X.reshape(B, m, tau, size).transpose(0, 2, 1, 3).reshape(B * tau, m, size)
            obs = act.transpose(0, 2, 1).reshape(B * tau, size)
            loss = energy_score_batch(samples, obs, cfg.beta).sum() / B
            gs, _ = energy_score_batch_grad(samples, obs, cfg.beta)
            G = gs.reshape(B, tau, m, size).transpose(0, 2, 1, 3).reshape(-1, size) / B
            dQ_r, _ = dcl_backward_batch(X, flat, W, G, params, hier)
            new, state = adam_step(state, {"Q_r": params.Q_r}, {"Q_r": dQ_r * lower})
            params = ReconcilerParams(np.tril(new["Q_r"])).floored()
            losses.append(loss)
        val = reconciled_energy(val_sub, val_actual, params, hier, cfg.beta)
        history.append({"epoch": epoch, "train": float(np.mean(losses)), "val": val})
        if log:
            log(f"reconciler epoch {epoch}: train {np.mean(losses):.5f} val {val:.5f}")
        if val < best_val:
            best, best_val = params, val
    return best, history
