"""Exponential AFT survival model for incident inter-arrival times.

The log inter-arrival time is linear in the covariates plus a standard
extreme-value error, which makes tau exponential with mean exp(beta . w).
Times inside the model are in hours.
"""
import bisect
import json
import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_random_state, check_X_y

from .errors import DivergenceError, FormatError, RateOverflow, SchemaError
from .timeutil import SECONDS_PER_DAY, SECONDS_PER_HOUR, to_datetime

MODEL_FORMAT = "rtdispatch-survival"
MODEL_VERSION = 1

# exp() overflows double precision just above this
_MAX_EXPONENT = 709.0

TIME_OF_DAY_BINS = 6
SEASONS = ("winter", "spring", "summer", "fall")
COUNT_WINDOWS_DAYS = (2, 7, 30)


@dataclass(frozen=True)
class FeatureSchema:
    names: tuple

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))

    def __len__(self):
        return len(self.names)

    def index(self, name):
        return self.names.index(name)

    def aliased_directions(self):
        """Directions in coefficient space that leave every prediction unchanged.

        A full one-hot group plus an intercept are collinear; each group
        contributes one direction (+1 on the group, -1 on the intercept).
        """
        if "intercept" not in self.names:
            return np.zeros((0, len(self)))
        dirs = []
        for prefix in ("tod_", "season_"):
            cols = [i for i, n in enumerate(self.names) if n.startswith(prefix)]
            if cols:
                v = np.zeros(len(self))
                v[cols] = 1.0
                v[self.index("intercept")] = -1.0
                dirs.append(v)
        return np.array(dirs).reshape(len(dirs), len(self))

    def canonical(self, beta):
        """Project ``beta`` off the aliased directions (same predictions)."""
        dirs = self.aliased_directions()
        beta = np.asarray(beta, dtype=float)
        if len(dirs) == 0:
            return beta
        coef, *_ = np.linalg.lstsq(dirs.T, beta, rcond=None)
        return beta - dirs.T @ coef


def default_schema():
    names = [f"tod_{i}" for i in range(TIME_OF_DAY_BINS)]
    names.append("weekend")
    names += [f"season_{s}" for s in SEASONS]
    names += ["temp_mean", "rainfall"]
    names += [f"count_{d}d" for d in COUNT_WINDOWS_DAYS]
    names += [f"nbr_count_{d}d" for d in COUNT_WINDOWS_DAYS]
    names.append("intercept")
    return FeatureSchema(names)


DEFAULT_SCHEMA = default_schema()


def season_of(month):
    return {12: 0, 1: 0, 2: 0, 3: 1, 4: 1, 5: 1, 6: 2, 7: 2, 8: 2}.get(month, 3)


class IncidentHistory:
    """Per-cell sorted incident times, for trailing-window counts."""

    def __init__(self, incidents=()):
        self._times = defaultdict(list)
        self.last_time = -math.inf
        for inc in incidents:
            self.add(inc.grid_id, inc.occurred_at)

    def add(self, cell, t):
        times = self._times[cell]
        if times and t < times[-1]:
            bisect.insort(times, t)
        else:
            times.append(t)
        self.last_time = max(self.last_time, t)

    def count(self, cell, start, end):
        """Incidents in ``cell`` with ``start < t <= end``."""
        times = self._times.get(cell)
        if not times:
            return 0
        return bisect.bisect_right(times, end) - bisect.bisect_right(times, start)

    def copy(self):
        other = IncidentHistory()
        other._times = defaultdict(list, {k: list(v) for k, v in self._times.items()})
        other.last_time = self.last_time
        return other


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray
    weather_missing: bool = False


def build_features(history, cell, time, weather=None):
    """Covariates for ``cell`` at ``time`` (epoch seconds).

    ``history`` is an :class:`IncidentHistory` (or anything with its
    ``count`` method), a list of incidents, or None. Counts cover
    ``(time - window, time]``.
    """
    if history is None or isinstance(history, (list, tuple)):
        history = IncidentHistory(history or ())
    dt = to_datetime(time)
    w = np.zeros(len(DEFAULT_SCHEMA))
    w[dt.hour * TIME_OF_DAY_BINS // 24] = 1.0
    w[TIME_OF_DAY_BINS] = 1.0 if dt.weekday() >= 5 else 0.0
    w[TIME_OF_DAY_BINS + 1 + season_of(dt.month)] = 1.0
    missing = weather is None
    if not missing:
        w[11], w[12] = float(weather[0]), float(weather[1])
    base = 13
    nbrs = cell.neighbor_ids
    for k, days in enumerate(COUNT_WINDOWS_DAYS):
        start = time - days * SECONDS_PER_DAY
        w[base + k] = history.count(cell.id, start, time)
        w[base + 3 + k] = sum(history.count(n, start, time) for n in nbrs)
    w[-1] = 1.0
    return FeatureVector(w, missing)


@dataclass(frozen=True)
class SurvivalModel:
    beta: np.ndarray
    schema: FeatureSchema
    converged: bool = field(default=True, compare=False)
    n_iter: int = field(default=0, compare=False)

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=float).copy()
        if beta.ndim != 1 or len(beta) != len(self.schema):
            raise SchemaError(f"beta has {beta.size} entries, schema has {len(self.schema)}")
        if not np.all(np.isfinite(beta)):
            raise SchemaError("beta must be finite")
        beta.setflags(write=False)
        object.__setattr__(self, "beta", beta)

    def __eq__(self, other):
        return (isinstance(other, SurvivalModel) and self.schema == other.schema
                and np.array_equal(self.beta, other.beta))

    __hash__ = None

    def with_beta(self, beta, **kw):
        return SurvivalModel(beta, self.schema, **kw)


def generic_model(beta, names=None):
    beta = np.asarray(beta, dtype=float)
    names = names or [f"w{i}" for i in range(len(beta))]
    return SurvivalModel(beta, FeatureSchema(names))


@dataclass(frozen=True)
class SurvivalDataset:
    """Inter-arrival times ``tau`` (hours, > 0) and covariate rows ``W``."""
    tau: np.ndarray
    W: np.ndarray

    def __post_init__(self):
        tau = np.asarray(self.tau, dtype=float).reshape(-1)
        W = np.asarray(self.W, dtype=float)
        if W.ndim == 1:
            W = W.reshape(len(tau), -1) if len(tau) else W.reshape(0, 0)
        if W.shape[0] != tau.shape[0]:
            raise SchemaError("tau and W row counts differ")
        if np.any(tau <= 0):
            raise ValueError("inter-arrival times must be positive")
        object.__setattr__(self, "tau", tau)
        object.__setattr__(self, "W", W)

    def __len__(self):
        return len(self.tau)

    @classmethod
    def from_records(cls, records):
        records = list(records)
        if not records:
            return cls(np.zeros(0), np.zeros((0, 0)))
        tau = [r[0] for r in records]
        W = [getattr(r[1], "values", r[1]) for r in records]
        return cls(np.array(tau, dtype=float), np.array(W, dtype=float))

    def split(self, frac, rng=None):
        n = len(self)
        if rng is None:
            idx = np.arange(n)
        elif isinstance(rng, np.random.Generator):
            idx = rng.permutation(n)
        else:
            idx = check_random_state(rng).permutation(n)
        cut = int(round(frac * n))
        a, b = idx[:cut], idx[cut:]
        return SurvivalDataset(self.tau[a], self.W[a]), SurvivalDataset(self.tau[b], self.W[b])

    def __add__(self, other):
        return SurvivalDataset(np.concatenate([self.tau, other.tau]),
                               np.vstack([self.W, other.W]))


def _check(model, data):
    if data.W.shape[1] != len(model.beta):
        raise SchemaError(f"data has {data.W.shape[1]} features, model has {len(model.beta)}")


def _beta(model):
    return model.beta if isinstance(model, SurvivalModel) else np.asarray(model, dtype=float)


def _residuals(beta, data):
    return np.log(data.tau) - data.W @ beta


def log_likelihood(model, data):
    """Sum over observations of z - exp(z), with z = log(tau) - beta . w."""
    beta = _beta(model)
    if data.W.shape[1] != len(beta):
        raise SchemaError(f"data has {data.W.shape[1]} features, model has {len(beta)}")
    z = _residuals(beta, data)
    with np.errstate(over="ignore"):
        return float(np.sum(z - np.exp(z)))


def gradient(model, data):
    beta = _beta(model)
    if data.W.shape[1] != len(beta):
        raise SchemaError(f"data has {data.W.shape[1]} features, model has {len(beta)}")
    with np.errstate(over="ignore"):
        ez = np.exp(_residuals(beta, data))
    return data.W.T @ (ez - 1.0)


def hessian(model, data):
    beta = _beta(model)
    with np.errstate(over="ignore"):
        ez = np.exp(_residuals(beta, data))
    return -(data.W.T * ez) @ data.W


def _row_space_projection(beta, W):
    if W.size == 0:
        return beta
    _, s, vt = np.linalg.svd(W, full_matrices=False)
    rank = int(np.sum(s > s[0] * 1e-10)) if len(s) and s[0] > 0 else 0
    if rank == W.shape[1]:
        return beta
    v = vt[:rank]
    return v.T @ (v @ beta)


def _likelihood_gain(z, a):
    """L(beta + delta) - L(beta) where ``a = W @ delta``, without cancellation."""
    with np.errstate(over="ignore", invalid="ignore"):
        return float(np.sum(-a - np.exp(z) * np.expm1(-a)))


def fit_batch(data, init=None, step=1e-3, tol=1e-6, max_iter=500, method="gradient",
              schema=None):
    """Maximum-likelihood coefficients.

    ``method="gradient"`` is gradient ascent with a backtracking line search
    whose trial step starts at ``step`` and adapts between iterations. The
    ascent runs in whitened coordinates (fixed metric ``pinv(W'W)``) since
    raw count covariates make plain steps crawl. ``"newton"`` takes damped
    Newton steps. When the design is rank deficient the result is the maximizer lying in the row space of ``W``.
    """
    if len(data) == 0:
        raise ValueError("no observations")
    m = data.W.shape[1]
    schema = schema or FeatureSchema([f"w{i}" for i in range(m)])
    beta = np.zeros(m) if init is None else np.asarray(_beta(init), dtype=float).copy()
    if len(beta) != m or len(schema) != m:
        raise SchemaError("init/schema length does not match data")

    L = log_likelihood(beta, data)
    if not np.isfinite(L):
        raise DivergenceError("log-likelihood is not finite at the initial point")
    converged = False
    trial = step
    metric = np.linalg.pinv(data.W.T @ data.W) if method == "gradient" else None
    it = 0
    for it in range(1, max_iter + 1):
        g = gradient(beta, data)
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient at iteration {it}")
        if np.max(np.abs(g), initial=0.0) <= tol:
            converged = True
            break
        if method == "newton":
            H = hessian(beta, data)
            direction = np.linalg.lstsq(-H, g, rcond=None)[0]
            t = 1.0
        elif method == "gradient":
            direction = metric @ g
            t = trial
        else:
            raise ValueError(f"unknown method {method!r}")
        slope = float(g @ direction)
        z = _residuals(beta, data)
        Wd = data.W @ direction
        while t >= 1e-30:
            gain = _likelihood_gain(z, t * Wd)
            if np.isfinite(gain) and gain > 0 and gain >= 1e-4 * t * slope:
                break
            t *= 0.5
        else:
            # no representable ascent step left
            converged = bool(np.max(np.abs(g)) <= tol)
            break
        beta = beta + t * direction
        L = log_likelihood(beta, data)
        if not np.isfinite(L):
            raise DivergenceError(f"log-likelihood became non-finite at iteration {it}")
        if method == "gradient":
            trial = 2.0 * t
    else:
        g = gradient(beta, data)
        converged = bool(np.max(np.abs(g), initial=0.0) <= tol)
    beta = _row_space_projection(beta, data.W)
    if not np.all(np.isfinite(beta)):
        raise DivergenceError("coefficients became non-finite")
    return SurvivalModel(beta, schema, converged=bool(converged), n_iter=it)


def update_streaming(base, stream, step=1e-3, max_iter=100):
    """Online refinement of ``base`` on newly observed data.

    Plain gradient steps ``beta + step * grad``; the first step that lowers
    the stream likelihood is discarded and the previous iterate returned.
    """
    if len(stream) == 0:
        return base
    _check(base, stream)
    beta = base.beta.copy()
    L = log_likelihood(beta, stream)
    for _ in range(max_iter):
        cand = beta + step * gradient(beta, stream)
        Lc = log_likelihood(cand, stream)
        if not np.isfinite(Lc) or Lc < L:
            break
        beta, L = cand, Lc
    return base.with_beta(beta)


def _linear(model, w):
    w = np.asarray(getattr(w, "values", w), dtype=float)
    if w.shape[-1] != len(model.beta):
        raise SchemaError(f"feature vector has {w.shape[-1]} entries, model has {len(model.beta)}")
    eta = w @ model.beta
    if np.any(eta > _MAX_EXPONENT):
        raise RateOverflow(f"beta . w = {np.max(eta):.3g} overflows")
    return eta


def expected_interarrival(model, w):
    """Mean inter-arrival time, exp(beta . w), in model time units (hours)."""
    eta = _linear(model, w)
    return float(np.exp(eta)) if np.ndim(eta) == 0 else np.exp(eta)


def sample_interarrival(model, w, rng=None, u=None):
    """Inverse-CDF draw: mean * (-log U) with U uniform on (0, 1)."""
    mean = math.exp(_linear(model, w))
    if u is None:
        rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
        u = rng.random()
        while u == 0.0:
            u = rng.random()
    return mean * -math.log(u)


def interarrival_dataset(incidents, grid, time_unit=SECONDS_PER_HOUR):
    """Per-cell inter-arrival records from a time-ordered incident list.

    Each record pairs the gap to the next incident in the same cell with
    the covariates at the earlier incident (history up to and including it).
    """
    history = IncidentHistory()
    pending = {}
    records = []
    for inc in sorted(incidents, key=lambda i: (i.occurred_at, i.id)):
        history.add(inc.grid_id, inc.occurred_at)
        prev = pending.get(inc.grid_id)
        if prev is not None and inc.occurred_at > prev[0]:
            records.append(((inc.occurred_at - prev[0]) / time_unit, prev[1]))
        fv = build_features(history, grid[inc.grid_id], inc.occurred_at, inc.weather)
        pending[inc.grid_id] = (inc.occurred_at, fv.values)
    if not records:
        return SurvivalDataset(np.zeros(0), np.zeros((0, len(DEFAULT_SCHEMA))))
    return SurvivalDataset.from_records(records)


def model_to_dict(model):
    return {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "time_unit": "hours",
        "features": list(model.schema.names),
        "beta": [float(b) for b in model.beta],
    }


def save_model(model, path):
    with open(path, "w") as fh:
        json.dump(model_to_dict(model), fh, indent=2)
        fh.write("\n")


def load_model(path):
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if doc.get("format") != MODEL_FORMAT:
        raise FormatError(f"{path}: not a survival model file")
    if doc.get("version") != MODEL_VERSION:
        raise FormatError(f"{path}: unsupported version {doc.get('version')}")
    return SurvivalModel(np.array(doc["beta"], dtype=float), FeatureSchema(doc["features"]))


class SurvivalRegressor(BaseEstimator, RegressorMixin):
    """Estimator wrapper: ``fit`` is batch MLE, ``partial_fit`` the streaming update.

    ``y`` holds inter-arrival times; ``predict`` returns their expectation.

    Parameters
    ----------
    method : {"gradient", "newton"}
    step, tol, max_iter : batch fitting controls.
    stream_step, stream_max_iter : streaming update controls.
    feature_names : optional list of column names.
    """

    def __init__(self, method="gradient", step=1e-3, tol=1e-6, max_iter=500,
                 stream_step=1e-3, stream_max_iter=100, feature_names=None):
        self.method = method
        self.step = step
        self.tol = tol
        self.max_iter = max_iter
        self.stream_step = stream_step
        self.stream_max_iter = stream_max_iter
        self.feature_names = feature_names

    def _dataset(self, X, y):
        X, y = check_X_y(X, y, dtype=float)
        if np.any(y <= 0):
            raise ValueError("inter-arrival times must be positive")
        return SurvivalDataset(y, X)

    def _schema(self, m):
        return FeatureSchema(self.feature_names or [f"w{i}" for i in range(m)])

    def fit(self, X, y, beta_init=None):
        data = self._dataset(X, y)
        self.model_ = fit_batch(data, init=beta_init, step=self.step, tol=self.tol,
                                max_iter=self.max_iter, method=self.method,
                                schema=self._schema(data.W.shape[1]))
        self.coef_ = self.model_.beta
        self.converged_ = self.model_.converged
        self.n_iter_ = self.model_.n_iter
        self.n_features_in_ = data.W.shape[1]
        return self

    def partial_fit(self, X, y):
        data = self._dataset(X, y)
        if not hasattr(self, "model_"):
            self.model_ = SurvivalModel(np.zeros(data.W.shape[1]), self._schema(data.W.shape[1]))
            self.n_features_in_ = data.W.shape[1]
        self.model_ = update_streaming(self.model_, data, self.stream_step, self.stream_max_iter)
        self.coef_ = self.model_.beta
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=float)
        return expected_interarrival(self.model_, X)

    def score(self, X, y, sample_weight=None):
        """Mean log-likelihood per observation."""
        check_is_fitted(self, "model_")
        data = self._dataset(X, y)
        return log_likelihood(self.model_, data) / len(data)

    def sample(self, X, random_state=None):
        check_is_fitted(self, "model_")
        X = check_array(X, dtype=float)
        rng = check_random_state(random_state)
        u = rng.random_sample(X.shape[0])
        u[u == 0.0] = np.finfo(float).tiny
        return expected_interarrival(self.model_, X) * -np.log(u)
