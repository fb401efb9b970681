"""Feature-to-measurement regressors: OLS, ridge and epsilon-SVR with an RBF kernel.

All models standardize features with training statistics stored in the
model; targets stay in meters.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numba import njit
from scipy.spatial.distance import cdist, pdist

from .errors import FitError, ParameterError
from .fileio import read_json, write_json

SCHEMA = "morphofit.regression/1"
RIDGE_LAMBDAS = (0.01, 0.1, 1.0, 10.0)
SVR_C = (1.0, 10.0, 100.0)
SVR_BANDWIDTH_FACTORS = (0.5, 1.0, 2.0)
SVR_EPS_MM = (1.0, 2.0, 5.0)


def _as_design(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 1:
        X = X[:, None]
    if X.ndim != 2:
        raise ParameterError("features must be a 2D array (samples x features)")
    return X


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, X) -> "Standardizer":
        X = _as_design(X)
        std = X.std(axis=0)
        return cls(X.mean(axis=0), np.where(std > 0, std, 1.0))

    @classmethod
    def identity(cls, dim: int) -> "Standardizer":
        return cls(np.zeros(dim), np.ones(dim))

    def transform(self, X) -> np.ndarray:
        X = _as_design(X)
        if X.shape[1] != len(self.mean):
            raise ParameterError(f"expected {len(self.mean)} features, got {X.shape[1]}")
        return (X - self.mean) / self.std


# ---------------------------------------------------------------------------
# linear models


@dataclass(frozen=True)
class LinearModel:
    """``t = intercept + weights . z`` on standardized features ``z``."""

    kind: str
    intercept: float
    weights: np.ndarray
    scaler: Standardizer
    lam: float = 0.0

    @classmethod
    def from_weights(cls, omega, kind: str = "ols") -> "LinearModel":
        """Model with raw-feature weights ``omega = (w0, w1, ..., wC)``."""
        omega = np.asarray(omega, dtype=np.float64)
        return cls(kind, float(omega[0]), omega[1:].copy(), Standardizer.identity(len(omega) - 1))

    @property
    def n_features(self) -> int:
        return len(self.weights)

    @property
    def omega(self) -> np.ndarray:
        """Weights in raw feature units, intercept first."""
        w = self.weights / self.scaler.std
        return np.concatenate([[self.intercept - w @ self.scaler.mean], w])

    def predict(self, X) -> np.ndarray:
        return self.intercept + self.scaler.transform(X) @ self.weights

    def to_json(self) -> dict:
        return {"schema": SCHEMA, "kind": self.kind, "lambda": self.lam,
                "intercept": self.intercept, "weights": self.weights.tolist(),
                "mean": self.scaler.mean.tolist(), "std": self.scaler.std.tolist()}


def fit_ols(X, t, method: str = "qr") -> LinearModel:
    """Least squares with intercept; ``method`` is ``"qr"`` or ``"normal"``."""
    X, t = _as_design(X), np.asarray(t, dtype=np.float64)
    if len(X) != len(t) or len(t) < 2:
        raise FitError("need matching features/targets and at least 2 samples")
    sc = Standardizer.fit(X)
    Z = np.column_stack([np.ones(len(t)), sc.transform(X)])
    if method == "qr":
        q, r = np.linalg.qr(Z)
        d = np.abs(np.diag(r))
        if len(d) < Z.shape[1] or d.min() <= 1e-10 * max(d.max(), 1e-300) or Z.shape[0] < Z.shape[1]:
            raise FitError("design matrix is rank deficient; use ridge regression")
        w = np.linalg.solve(r, q.T @ t)
    elif method == "normal":
        G = Z.T @ Z
        try:
            c = np.linalg.cholesky(G)
        except np.linalg.LinAlgError:
            raise FitError("design matrix is rank deficient; use ridge regression") from None
        if np.diag(c).min() <= 1e-10 * np.diag(c).max():
            raise FitError("design matrix is rank deficient; use ridge regression")
        w = np.linalg.solve(c.T, np.linalg.solve(c, Z.T @ t))
    else:
        raise ParameterError(f"unknown OLS method {method!r}")
    return LinearModel("ols", float(w[0]), w[1:], sc)


def fit_ridge(X, t, lam: float) -> LinearModel:
    """Ridge regression with an unpenalized intercept (penalty on standardized weights)."""
    if not lam >= 0:
        raise ParameterError("lambda must be >= 0")
    X, t = _as_design(X), np.asarray(t, dtype=np.float64)
    if len(X) != len(t) or len(t) < 2:
        raise FitError("need matching features/targets and at least 2 samples")
    sc = Standardizer.fit(X)
    Z = sc.transform(X)  # columns have zero mean, so the intercept decouples
    tm = t.mean()
    A = Z.T @ Z + lam * np.eye(Z.shape[1])
    try:
        w = np.linalg.solve(A, Z.T @ (t - tm))
    except np.linalg.LinAlgError:
        raise FitError("ridge system singular; use lambda > 0") from None
    return LinearModel("ridge", float(tm), w, sc, float(lam))


# ---------------------------------------------------------------------------
# support vector regression


def rbf_kernel(A, B, bandwidth: float) -> np.ndarray:
    return np.exp(-cdist(A, B, "sqeuclidean") / (2.0 * bandwidth ** 2))


@njit(cache=True)
def _smo(K, y, C, eps, tol, max_iter, a0):
    """Epsilon-SVR dual by SMO with second-order working-set selection.

    Variables are ``a = [alpha; alpha*]`` with signs ``s = [+1; -1]`` and
    ``Q_ij = s_i s_j K_ij``, started from the feasible point ``a0``.
    Returns ``(a, rho, gap, iterations)``.
    """
    n = len(y)
    m = 2 * n
    a = a0.copy()
    s = np.empty(m)
    G = np.empty(m)
    beta = a[:n] - a[n:]
    Kb = K @ beta
    for k in range(n):
        s[k] = 1.0
        s[k + n] = -1.0
        G[k] = eps - y[k] + Kb[k]
        G[k + n] = eps + y[k] - Kb[k]
    tau = 1e-12
    it = 0
    gap = np.inf
    while it < max_iter:
        # i: maximal violating index in I_up
        gmax = -np.inf
        i = -1
        for t in range(m):
            if s[t] > 0:
                if a[t] < C and -G[t] >= gmax:
                    gmax = -G[t]
                    i = t
            else:
                if a[t] > 0 and G[t] >= gmax:
                    gmax = G[t]
                    i = t
        gmax2 = -np.inf
        j = -1
        best = np.inf
        if i >= 0:
            ki = i % n
            for t in range(m):
                kt = t % n
                qit = s[i] * s[t] * K[ki, kt]
                if s[t] > 0:
                    if a[t] > 0:
                        if G[t] >= gmax2:
                            gmax2 = G[t]
                        gd = gmax + G[t]
                        if gd > 0:
                            quad = K[ki, ki] + K[kt, kt] - 2.0 * s[i] * qit
                            if quad <= 0:
                                quad = tau
                            val = -gd * gd / quad
                            if val <= best:
                                best = val
                                j = t
                else:
                    if a[t] < C:
                        if -G[t] >= gmax2:
                            gmax2 = -G[t]
                        gd = gmax - G[t]
                        if gd > 0:
                            quad = K[ki, ki] + K[kt, kt] + 2.0 * s[i] * qit
                            if quad <= 0:
                                quad = tau
                            val = -gd * gd / quad
                            if val <= best:
                                best = val
                                j = t
        gap = gmax + gmax2
        if gap < tol or j < 0:
            break
        ki, kj = i % n, j % n
        qij = s[i] * s[j] * K[ki, kj]
        qii, qjj = K[ki, ki], K[kj, kj]
        ai_old, aj_old = a[i], a[j]
        if s[i] != s[j]:
            quad = qii + qjj + 2.0 * qij
            if quad <= 0:
                quad = tau
            delta = (-G[i] - G[j]) / quad
            diff = a[i] - a[j]
            a[i] += delta
            a[j] += delta
            if diff > 0:
                if a[j] < 0:
                    a[j] = 0.0
                    a[i] = diff
            else:
                if a[i] < 0:
                    a[i] = 0.0
                    a[j] = -diff
            if diff > 0:
                if a[i] > C:
                    a[i] = C
                    a[j] = C - diff
            else:
                if a[j] > C:
                    a[j] = C
                    a[i] = C + diff
        else:
            quad = qii + qjj - 2.0 * qij
            if quad <= 0:
                quad = tau
            delta = (G[i] - G[j]) / quad
            tot = a[i] + a[j]
            a[i] -= delta
            a[j] += delta
            if tot > C:
                if a[i] > C:
                    a[i] = C
                    a[j] = tot - C
            else:
                if a[j] < 0:
                    a[j] = 0.0
                    a[i] = tot
            if tot > C:
                if a[j] > C:
                    a[j] = C
                    a[i] = tot - C
            else:
                if a[i] < 0:
                    a[i] = 0.0
                    a[j] = tot
        dai = a[i] - ai_old
        daj = a[j] - aj_old
        for t in range(m):
            kt = t % n
            G[t] += s[i] * s[t] * K[ki, kt] * dai + s[j] * s[t] * K[kj, kt] * daj
        it += 1
    # offset: average over free variables, else midpoint of the feasible interval
    ub = np.inf
    lb = -np.inf
    acc = 0.0
    nfree = 0
    for t in range(m):
        yg = s[t] * G[t]
        if a[t] >= C:
            if s[t] < 0:
                ub = min(ub, yg)
            else:
                lb = max(lb, yg)
        elif a[t] <= 0:
            if s[t] > 0:
                ub = min(ub, yg)
            else:
                lb = max(lb, yg)
        else:
            nfree += 1
            acc += yg
    rho = acc / nfree if nfree > 0 else 0.5 * (ub + lb)
    return a, rho, gap, it


@dataclass(frozen=True)
class SVRModel:
    """``f(x) = sum_k coef_k K(sv_k, z) + bias`` on standardized ``z``."""

    support: np.ndarray     # (S, d) standardized support vectors
    coef: np.ndarray        # (S,) alpha - alpha*, within [-c_box, c_box]
    bias: float
    bandwidth: float
    c_box: float
    eps_tube: float
    scaler: Standardizer
    kind: str = "svr"
    kkt_gap: float = 0.0

    @property
    def n_features(self) -> int:
        return len(self.scaler.mean)

    def predict(self, X) -> np.ndarray:
        Z = self.scaler.transform(X)
        if len(self.coef) == 0:
            return np.full(len(Z), self.bias)
        return rbf_kernel(Z, self.support, self.bandwidth) @ self.coef + self.bias

    def to_json(self) -> dict:
        return {"schema": SCHEMA, "kind": "svr", "support": self.support.tolist(),
                "coef": self.coef.tolist(), "bias": self.bias, "bandwidth": self.bandwidth,
                "c_box": self.c_box, "eps_tube": self.eps_tube, "kkt_gap": self.kkt_gap,
                "mean": self.scaler.mean.tolist(), "std": self.scaler.std.tolist()}


_SMO_COLD_BUDGET = 10_000


def _qp_start(K, y, C, eps) -> Optional[np.ndarray]:
    """Feasible near-optimal ``[alpha; alpha*]`` from cvxopt's interior-point QP.

    Values within ``1e-9 C`` of a bound are snapped onto it and the equality
    constraint is restored on the free coefficients. ``None`` if the QP
    solver fails.
    """
    from cvxopt import matrix, solvers, spmatrix

    n = len(y)
    m = 2 * n
    P = np.block([[K, -K], [-K, K]])
    q = np.concatenate([eps - y, eps + y])
    rows = list(range(2 * m))
    G = spmatrix([-1.0] * m + [1.0] * m, rows, list(range(m)) * 2)
    h = np.concatenate([np.zeros(m), np.full(m, C)])
    A = matrix(np.concatenate([np.ones(n), -np.ones(n)])[None, :])
    try:
        sol = solvers.qp(matrix(P), matrix(q), G, matrix(h), A, matrix(0.0),
                         options={"show_progress": False})
    except (ValueError, ArithmeticError):
        return None
    if sol["x"] is None:
        return None
    x = np.array(sol["x"]).ravel()
    b = np.clip(x[:n] - x[n:], -C, C)
    snap = 1e-9 * C
    b[np.abs(b) < snap] = 0.0
    b[b > C - snap] = C
    b[b < -C + snap] = -C
    free = (b != 0) & (np.abs(b) < C)
    if free.any():
        b[free] -= b.sum() / free.sum()
    b = np.clip(b, -C, C)
    if abs(b.sum()) > 1e-9 * C * n:
        return None
    return np.concatenate([np.maximum(b, 0.0), np.maximum(-b, 0.0)])


def fit_svr(X, t, c_box: float, eps_tube: float, bandwidth: float, tol: float = 1e-6,
            max_iter: Optional[int] = None, standardize: bool = True) -> SVRModel:
    """Epsilon-insensitive SVR with kernel ``exp(-|a-b|^2 / (2 bandwidth^2))``.

    ``bandwidth`` is measured in standardized feature units; ``eps_tube`` and
    the targets are in meters. The dual is solved to a maximal KKT violation
    below ``tol``.
    """
    if not c_box > 0 or not bandwidth > 0 or not eps_tube >= 0:
        raise ParameterError("need c_box > 0, bandwidth > 0, eps_tube >= 0")
    X, t = _as_design(X), np.asarray(t, dtype=np.float64)
    if len(X) != len(t) or len(t) < 2:
        raise FitError("need matching features/targets and at least 2 samples")
    sc = Standardizer.fit(X) if standardize else Standardizer.identity(X.shape[1])
    Z = sc.transform(X)
    K = rbf_kernel(Z, Z, bandwidth)
    cap = max_iter if max_iter is not None else max(1_000_000, 1000 * len(t))
    C, eps = float(c_box), float(eps_tube)
    # Plain SMO is quick on easy problems but crawls on ill-conditioned
    # kernels with a large box. Past a short budget, restart it from an
    # interior-point solution of the same dual and let SMO finish the job.
    budget = min(int(cap), _SMO_COLD_BUDGET)
    a, rho, gap, it = _smo(K, t, C, eps, float(tol), budget, np.zeros(2 * len(t)))
    if gap >= tol and cap > budget:
        a0 = _qp_start(K, t, C, eps)
        a, rho, gap, it2 = _smo(K, t, C, eps, float(tol), int(cap) - budget, a if a0 is None else a0)
        it += it2
    if gap >= tol:
        raise FitError(f"SVR did not converge in {it} iterations (KKT violation {gap:.3g})")
    n = len(t)
    coef = a[:n] - a[n:]
    sv = np.flatnonzero(coef != 0)
    return SVRModel(Z[sv].copy(), coef[sv].copy(), float(-rho), float(bandwidth), float(c_box),
                    float(eps_tube), sc, kkt_gap=float(gap))


def svr_kkt_violation(model: SVRModel, X, t) -> float:
    """Largest KKT violation of ``model`` on its training data (meters).

    Uses only predictions and dual coefficients, not solver internals: zero
    coefficients need ``|r| <= eps``, free ones ``r = eps * sign(coef)`` and
    bounded ones ``r * sign(coef) >= eps``, with residual ``r = t - f(x)``.
    Points are matched to support vectors by position in standardized space.
    """
    X, t = _as_design(X), np.asarray(t, dtype=np.float64)
    Z = model.scaler.transform(X)
    coef = np.zeros(len(t))
    if len(model.coef):
        d = cdist(Z, model.support)
        taken = np.zeros(len(t), dtype=bool)
        for k in range(len(model.coef)):
            cand = np.flatnonzero((d[:, k] <= 1e-12) & ~taken)
            if len(cand):
                coef[cand[0]] = model.coef[k]
                taken[cand[0]] = True
    r = t - model.predict(X)
    eps, C = model.eps_tube, model.c_box
    tolb = 1e-12 * C
    viol = np.zeros(len(t))
    zero = coef == 0
    viol[zero] = np.maximum(np.abs(r[zero]) - eps, 0.0)
    sgn = np.sign(coef)
    bound = ~zero & (np.abs(coef) >= C - tolb)
    free = ~zero & ~bound
    viol[free] = np.abs(r[free] * sgn[free] - eps)
    viol[bound] = np.maximum(eps - r[bound] * sgn[bound], 0.0)
    return float(viol.max()) if len(viol) else 0.0


# ---------------------------------------------------------------------------
# configuration, model selection, persistence


@dataclass(frozen=True)
class RegressorConfig:
    """Regressor family plus hyperparameters; ``None`` entries are tuned by inner CV."""

    kind: str = "svr"
    lam: Optional[float] = None
    c_box: Optional[float] = None
    bandwidth_factor: Optional[float] = None
    eps_tube: Optional[float] = None      # meters
    inner_folds: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("ols", "ridge", "svr"):
            raise ParameterError(f"unknown regressor {self.kind!r}")

    def grid(self) -> list:
        if self.kind == "ols":
            return [{}]
        if self.kind == "ridge":
            return [{"lam": l} for l in ((self.lam,) if self.lam is not None else RIDGE_LAMBDAS)]
        cs = (self.c_box,) if self.c_box is not None else SVR_C
        bws = (self.bandwidth_factor,) if self.bandwidth_factor is not None else SVR_BANDWIDTH_FACTORS
        es = (self.eps_tube,) if self.eps_tube is not None else tuple(e / 1000 for e in SVR_EPS_MM)
        return [{"c_box": c, "bandwidth_factor": b, "eps_tube": e}
                for c, b, e in itertools.product(cs, bws, es)]


def median_distance(X) -> float:
    Z = Standardizer.fit(X).transform(X)
    d = pdist(Z)
    med = float(np.median(d)) if len(d) else 1.0
    return med if med > 0 else 1.0


def fit_with(kind: str, X, t, params: dict):
    if kind == "ols":
        return fit_ols(X, t)
    if kind == "ridge":
        return fit_ridge(X, t, params["lam"])
    bw = params["bandwidth_factor"] * median_distance(X)
    return fit_svr(X, t, params["c_box"], params["eps_tube"], bw)


def _inner_splits(n: int, k: int, seed: int):
    perm = np.random.default_rng(seed).permutation(n)
    return [np.sort(perm[j::k]) for j in range(k)]


def select_params(config: RegressorConfig, X, t) -> dict:
    """Grid point with the lowest inner-CV MAE (first in grid order on ties)."""
    grid = config.grid()
    if len(grid) == 1:
        return grid[0]
    X, t = _as_design(X), np.asarray(t, dtype=np.float64)
    k = min(config.inner_folds, len(t))
    if k < 2:
        return grid[0]
    splits = _inner_splits(len(t), k, config.seed)
    best, best_err = grid[0], np.inf
    for params in grid:
        err = 0.0
        for test in splits:
            train = np.setdiff1d(np.arange(len(t)), test)
            model = fit_with(config.kind, X[train], t[train], params)
            err += np.abs(model.predict(X[test]) - t[test]).sum()
        if err < best_err:
            best, best_err = params, err
    return best


def fit(config: RegressorConfig, X, t, params: Optional[dict] = None):
    """Fit ``config.kind``; hyperparameters come from ``params`` or inner CV."""
    if params is None:
        params = select_params(config, X, t)
    return fit_with(config.kind, X, t, params)


def predict(model, features) -> np.ndarray:
    """Estimates (meters) for one feature vector or a 2D batch."""
    f = np.asarray(features, dtype=np.float64)
    single = f.ndim == 1
    X = f[None, :] if single else f
    if X.shape[1] != model.n_features:
        raise ParameterError(f"model expects {model.n_features} features, got {X.shape[1]}")
    out = model.predict(X)
    return out[0] if single else out


def model_from_json(obj):
    if obj.get("schema") != SCHEMA:
        raise ParameterError(f"unsupported model schema {obj.get('schema')!r}")
    sc = Standardizer(np.asarray(obj["mean"], dtype=np.float64), np.asarray(obj["std"], dtype=np.float64))
    if obj["kind"] in ("ols", "ridge"):
        return LinearModel(obj["kind"], float(obj["intercept"]), np.asarray(obj["weights"], dtype=np.float64),
                           sc, float(obj.get("lambda", 0.0)))
    if obj["kind"] == "svr":
        return SVRModel(np.asarray(obj["support"], dtype=np.float64).reshape(-1, len(sc.mean)),
                        np.asarray(obj["coef"], dtype=np.float64), float(obj["bias"]),
                        float(obj["bandwidth"]), float(obj["c_box"]), float(obj["eps_tube"]), sc,
                        kkt_gap=float(obj.get("kkt_gap", 0.0)))
    raise ParameterError(f"unknown model kind {obj['kind']!r}")


def save_model(model, path) -> None:
    write_json(path, model.to_json())


def load_model(path):
    return model_from_json(read_json(path))
