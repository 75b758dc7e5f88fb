"""Split-conformal interval calibration: cp, cqr and group-conditional ecqr.

All three methods share the same machinery: a conformity score on a
held-out calibration set, an order-statistic calibration factor, and a
symmetric expansion of the model's raw interval. "cp" scores distance to
the interval midpoint (the canonical split-conformal regression baseline),
"cqr" scores against the raw quantile interval with one global factor,
and "ecqr" computes a separate factor per sensitive group so coverage is
equalized across groups.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .domain import PredictionInterval, SensitiveGroup
from .forest import CAL_MAGIC, QuantileForestRegressor, qrf_section_end

METHODS = ("cp", "cqr", "ecqr")

# absorbs float noise in alpha*(n+1) so exact-integer products stay exact
_CEIL_TOL = 1e-9


class EmptyScoresError(ValueError):
    """calibration_quantile received no scores."""


class EmptyCalibrationError(ValueError):
    """calibrate received an empty calibration set."""


class UnknownGroupError(KeyError):
    """ecqr prediction asked for a group absent from calibration."""


def conformity_score(pi: PredictionInterval, y: float) -> float:
    """max(lo - y, y - hi); negative iff y lies strictly inside the interval."""
    return max(pi.lo - y, y - pi.hi)


def conformity_scores(lo: np.ndarray, hi: np.ndarray, y: np.ndarray) -> np.ndarray:
    return np.maximum(lo - y, y - hi)


def calibration_quantile(scores, alpha: float) -> float:
    """The ceil(alpha*(n+1))-th smallest score; +inf when that exceeds n."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    if scores.size == 0:
        raise EmptyScoresError("need at least one conformity score")
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must be in (0,1), got {alpha}")
    n = scores.size
    k = math.ceil(alpha * (n + 1) - _CEIL_TOL)
    if k > n:
        return math.inf
    return float(np.sort(scores)[k - 1])


@dataclass(frozen=True)
class CalibrationFactor:
    """Interval expansion widths learned on the calibration split."""

    method: str
    alpha: float
    global_q: float | None = None
    per_group_q: dict[SensitiveGroup, float] = field(default_factory=dict)
    per_group_n: dict[SensitiveGroup, int] = field(default_factory=dict)

    def q_for(self, group=None) -> float:
        if self.method == "ecqr":
            g = SensitiveGroup(group)
            if g not in self.per_group_q:
                raise UnknownGroupError(
                    f"group {g.name} was absent from the calibration set"
                )
            return self.per_group_q[g]
        if self.global_q is None:
            raise ValueError(f"method {self.method!r} has no global factor set")
        return self.global_q


def _raw_intervals(model, X, alpha, method):
    lo, hi = model.predict_interval(X, alpha)
    if method == "cp":
        mid = 0.5 * (lo + hi)
        return mid, mid
    return lo, hi


def calibrate(
    model: QuantileForestRegressor,
    X_cal,
    y_cal,
    groups=None,
    alpha: float = 0.9,
    method: str = "ecqr",
) -> CalibrationFactor:
    """Compute the calibration factor for one method at coverage alpha."""
    if method not in METHODS:
        raise ValueError(f"method must be one of {METHODS}, got {method!r}")
    X_cal = np.asarray(X_cal, dtype=np.float64)
    y_cal = np.asarray(y_cal, dtype=np.float64).reshape(-1)
    if y_cal.size == 0:
        raise EmptyCalibrationError("calibration set must be nonempty")
    lo, hi = _raw_intervals(model, X_cal, alpha, method)
    scores = conformity_scores(lo, hi, y_cal)

    if method != "ecqr":
        return CalibrationFactor(method, alpha, global_q=calibration_quantile(scores, alpha))

    if groups is None:
        raise ValueError("ecqr calibration needs the sensitive group of every record")
    groups = np.asarray(groups, dtype=np.int64).reshape(-1)
    per_q, per_n = {}, {}
    for g in sorted(set(int(v) for v in groups)):
        mask = groups == g
        q = calibration_quantile(scores[mask], alpha)
        if math.isinf(q):
            warnings.warn(
                f"group {SensitiveGroup(g).name}: calibration set too small for "
                f"alpha={alpha}; intervals for this group are unbounded",
                stacklevel=2,
            )
        per_q[SensitiveGroup(g)] = q
        per_n[SensitiveGroup(g)] = int(mask.sum())
    return CalibrationFactor(method, alpha, per_group_q=per_q, per_group_n=per_n)


def predict_intervals(
    model: QuantileForestRegressor,
    factor: CalibrationFactor,
    X,
    groups=None,
) -> tuple[np.ndarray, np.ndarray]:
    """Calibrated interval rows; collapses to the midpoint if the factor
    is negative enough to cross the bounds."""
    X = np.asarray(X, dtype=np.float64)
    lo, hi = _raw_intervals(model, X, factor.alpha, factor.method)
    if factor.method == "ecqr":
        if groups is None:
            raise ValueError("ecqr prediction needs the sensitive group of every row")
        groups = np.asarray(groups, dtype=np.int64).reshape(-1)
        q = np.array([factor.q_for(g) for g in groups])
    else:
        q = np.full(X.shape[0], factor.q_for())
    out_lo, out_hi = lo - q, hi + q
    collapsed = out_lo > out_hi
    if collapsed.any():
        mid = 0.5 * (lo + hi)
        out_lo = np.where(collapsed, mid, out_lo)
        out_hi = np.where(collapsed, mid, out_hi)
    return out_lo, out_hi


def predict_interval(
    model: QuantileForestRegressor,
    factor: CalibrationFactor,
    x,
    group=None,
) -> PredictionInterval:
    """Single-row convenience wrapper around predict_intervals."""
    x = np.asarray(x, dtype=np.float64).reshape(1, -1)
    g = None if group is None else [int(group)]
    lo, hi = predict_intervals(model, factor, x, g)
    return PredictionInterval(lo[0], hi[0])


def coverage_by_group(
    model: QuantileForestRegressor,
    factor: CalibrationFactor,
    X,
    y,
    groups,
) -> dict[SensitiveGroup, float]:
    """Fraction of test rows whose label falls in the calibrated interval,
    per group (closed interval); groups without test rows are omitted."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    groups = np.asarray(groups, dtype=np.int64).reshape(-1)
    lo, hi = predict_intervals(model, factor, X, groups)
    inside = (lo <= y) & (y <= hi)
    return {
        SensitiveGroup(g): float(np.mean(inside[groups == g]))
        for g in sorted(set(int(v) for v in groups))
    }


class ConformalCalibrator(BaseEstimator):
    """Estimator-style wrapper: fit on the calibration split, then predict
    calibrated intervals for new rows.

    Parameters
    ----------
    base : fitted QuantileForestRegressor supplying raw quantile intervals.
    method : one of "cp", "cqr", "ecqr".
    alpha : target coverage in (0, 1).
    """

    def __init__(self, base=None, method="ecqr", alpha=0.9):
        self.base = base
        self.method = method
        self.alpha = alpha

    def fit(self, X, y, groups=None):
        self.factor_ = calibrate(
            self.base, X, y, groups=groups, alpha=self.alpha, method=self.method
        )
        return self

    def predict_interval(self, X, groups=None):
        check_is_fitted(self, "factor_")
        return predict_intervals(self.base, self.factor_, X, groups)

    def coverage_by_group(self, X, y, groups):
        check_is_fitted(self, "factor_")
        return coverage_by_group(self.base, self.factor_, X, y, groups)

    def mean_length_by_group(self, X, groups):
        check_is_fitted(self, "factor_")
        lo, hi = self.predict_interval(X, groups)
        groups = np.asarray(groups, dtype=np.int64).reshape(-1)
        return {
            SensitiveGroup(g): float(np.mean(hi[groups == g] - lo[groups == g]))
            for g in sorted(set(int(v) for v in groups))
        }


# ---------------------------------------------------------------------------
# CAL1 checkpoint section


def factor_to_payload(factor: CalibrationFactor) -> dict:
    return {
        "method": factor.method,
        "alpha": factor.alpha,
        "global_q": factor.global_q,
        "per_group_q": {str(int(g)): q for g, q in factor.per_group_q.items()},
        "per_group_n": {str(int(g)): n for g, n in factor.per_group_n.items()},
    }


def factor_from_payload(payload: dict) -> CalibrationFactor:
    return CalibrationFactor(
        payload["method"],
        payload["alpha"],
        global_q=payload["global_q"],
        per_group_q={SensitiveGroup(int(k)): v for k, v in payload["per_group_q"].items()},
        per_group_n={SensitiveGroup(int(k)): v for k, v in payload["per_group_n"].items()},
    )


def append_calibration(path, factor: CalibrationFactor) -> None:
    """Append (or replace) the CAL1 section of a QRF1 checkpoint."""
    with open(path, "rb") as f:
        end = qrf_section_end(f)
        f.seek(0)
        blob = f.read(end)
    raw = json.dumps(factor_to_payload(factor), sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(blob)
        f.write(CAL_MAGIC)
        f.write(len(raw).to_bytes(8, "little"))
        f.write(raw)


def load_calibration(path) -> CalibrationFactor:
    with open(path, "rb") as f:
        end = qrf_section_end(f)
        f.seek(end)
        magic = f.read(4)
        if magic != CAL_MAGIC:
            raise ValueError(f"{path} carries no CAL1 section; run calibrate first")
        n = int.from_bytes(f.read(8), "little")
        payload = json.loads(f.read(n).decode("utf-8"))
    return factor_from_payload(payload)
