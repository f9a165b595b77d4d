"""Per-segment speed prediction from weekly time-binned historical means.

Any external predictor can be plugged in by exporting its predictions to
the profile file format (``segment_id,bin_index,speed_mph``) and loading
them with :func:`load_profiles`.
"""
import csv

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.metrics import mean_absolute_error
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .errors import FormatError, UnknownSegment
from .timeutil import MINUTES_PER_WEEK, parse_timestamp, seconds_into_week

MAX_SPEED_MPH = 120.0


class SpeedProfiles:
    """Weekly speed table, one row per segment, one column per bin."""

    def __init__(self, segment_ids, speeds, bin_width=30, freeflow=None):
        self.bin_width = int(bin_width)
        if MINUTES_PER_WEEK % self.bin_width:
            raise ValueError(f"bin_width {bin_width} does not divide a week")
        self.n_bins = MINUTES_PER_WEEK // self.bin_width
        self.segment_ids = np.asarray(segment_ids, dtype=np.int64)
        self.speeds = np.asarray(speeds, dtype=float).reshape(len(self.segment_ids), self.n_bins)
        if np.any(~np.isfinite(self.speeds)) or np.any(self.speeds <= 0):
            raise ValueError("profile speeds must be positive")
        self.index = {int(s): i for i, s in enumerate(self.segment_ids)}
        self.freeflow = (np.asarray(freeflow, dtype=float) if freeflow is not None
                         else self.speeds.max(axis=1))

    def bin_of(self, t):
        return min(int(seconds_into_week(t) // (self.bin_width * 60.0)), self.n_bins - 1)

    def row(self, segment_id):
        try:
            return self.index[int(segment_id)]
        except KeyError:
            raise UnknownSegment(segment_id) from None

    def predict(self, segment_id, t):
        return float(self.speeds[self.row(segment_id), self.bin_of(t)])

    def rows_for(self, segment_ids):
        try:
            return np.array([self.index[int(s)] for s in segment_ids], dtype=np.int64)
        except KeyError as exc:
            raise UnknownSegment(exc.args[0]) from None

    def max_slowdown(self):
        """Smallest ratio predicted_time / freeflow_time over all segments and bins."""
        return float(np.min(self.freeflow[:, None] / self.speeds))


def predict_speed(profiles, segment_id, time):
    return profiles.predict(segment_id, time)


class BinnedSpeedRegressor(BaseEstimator, RegressorMixin):
    """Estimator over ``X = [[segment_id, epoch_seconds], ...]`` and ``y = speed``.

    Bins without observations fall back to the segment's freeflow speed.
    """

    def __init__(self, bin_width=30, freeflow=None):
        self.bin_width = bin_width
        self.freeflow = freeflow

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=float)
        if np.any(y <= 0) or np.any(y > MAX_SPEED_MPH):
            raise ValueError("speeds must lie in (0, 120] mph")
        freeflow = dict(self.freeflow or {})
        seg = X[:, 0].astype(np.int64)
        unknown = set(np.unique(seg).tolist()) - set(freeflow) if freeflow else set()
        if unknown:
            raise UnknownSegment(min(unknown))
        ids = np.array(sorted(freeflow) if freeflow else np.unique(seg), dtype=np.int64)
        rows = {int(s): i for i, s in enumerate(ids)}
        n_bins = MINUTES_PER_WEEK // int(self.bin_width)
        r = np.array([rows[int(s)] for s in seg], dtype=np.int64)
        b = np.minimum((np.array([seconds_into_week(t) for t in X[:, 1]])
                        // (self.bin_width * 60.0)).astype(np.int64), n_bins - 1)
        sums = np.zeros((len(ids), n_bins))
        counts = np.zeros((len(ids), n_bins))
        np.add.at(sums, (r, b), y)
        np.add.at(counts, (r, b), 1.0)
        if freeflow:
            ff = np.array([freeflow[int(s)] for s in ids], dtype=float)
        else:
            ff = np.array([y[r == i].mean() for i in range(len(ids))])
        speeds = np.where(counts > 0, sums / np.maximum(counts, 1.0), ff[:, None])
        self.profiles_ = SpeedProfiles(ids, speeds, self.bin_width, ff)
        self.counts_ = counts
        return self

    def predict(self, X):
        check_is_fitted(self, "profiles_")
        X = check_array(X, dtype=float)
        return np.array([self.profiles_.predict(s, t) for s, t in X])


def fit_profiles(observations, network, bin_width=30):
    """Fit profiles from ``(segment_id, timestamp, speed)`` observations.

    Every segment of ``network`` gets a row; unseen bins use freeflow.
    """
    freeflow = network.segment_freeflow()
    obs = list(observations)
    if not obs:
        ids = sorted(freeflow)
        speeds = np.repeat([[freeflow[s]] for s in ids], MINUTES_PER_WEEK // bin_width, axis=1)
        return SpeedProfiles(ids, speeds, bin_width, [freeflow[s] for s in ids])
    X = np.array([[o[0], o[1]] for o in obs], dtype=float)
    y = np.array([o[2] for o in obs], dtype=float)
    return BinnedSpeedRegressor(bin_width, freeflow).fit(X, y).profiles_


def freeflow_profiles(network, bin_width=30):
    return fit_profiles([], network, bin_width)


def evaluate_mae(profiles, heldout):
    heldout = list(heldout)
    if not heldout:
        raise ValueError("heldout set is empty")
    pred = [profiles.predict(s, t) for s, t, _ in heldout]
    return float(mean_absolute_error([v for *_, v in heldout], pred))


def read_speed_csv(path):
    """Observations from a ``segment_id,timestamp,speed_mph`` CSV."""
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for lineno, row in enumerate(reader, start=2):
            try:
                speed = float(row["speed_mph"])
                out.append((int(row["segment_id"]), parse_timestamp(row["timestamp"]), speed))
            except (KeyError, TypeError, ValueError) as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from exc
            if not 0 < speed <= MAX_SPEED_MPH:
                raise FormatError(f"{path}:{lineno}: speed {speed} outside (0, 120]")
    return out


def save_profiles(profiles, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["segment_id", "bin_index", "speed_mph"])
        for i, seg in enumerate(profiles.segment_ids):
            for b in range(profiles.n_bins):
                w.writerow([int(seg), b, repr(float(profiles.speeds[i, b]))])


def load_profiles(path, network=None, bin_width=None):
    """Read a profile table; the bin width is inferred from the bin count.

    Missing (segment, bin) triples fall back to ``network`` freeflow.
    """
    table = {}
    try:
        with open(path, newline="") as fh:
            for lineno, row in enumerate(csv.DictReader(fh), start=2):
                try:
                    table[(int(row["segment_id"]), int(row["bin_index"]))] = float(row["speed_mph"])
                except (KeyError, TypeError, ValueError) as exc:
                    raise FormatError(f"{path}:{lineno}: {exc}") from exc
    except OSError as exc:
        raise FormatError(str(exc)) from exc
    if not table:
        raise FormatError(f"{path}: empty profile table")
    if bin_width is None:
        n_bins = max(b for _, b in table) + 1
        if MINUTES_PER_WEEK % n_bins:
            raise FormatError(f"{path}: {n_bins} bins do not tile a week")
        bin_width = MINUTES_PER_WEEK // n_bins
    n_bins = MINUTES_PER_WEEK // bin_width
    freeflow = network.segment_freeflow() if network is not None else {}
    ids = sorted(set(s for s, _ in table) | set(freeflow))
    speeds = np.empty((len(ids), n_bins))
    for i, s in enumerate(ids):
        for b in range(n_bins):
            v = table.get((s, b), freeflow.get(s))
            if v is None:
                raise FormatError(f"{path}: no speed for segment {s} bin {b}")
            speeds[i, b] = v
    ff = [freeflow.get(s, speeds[i].max()) for i, s in enumerate(ids)]
    return SpeedProfiles(ids, speeds, bin_width, ff)
