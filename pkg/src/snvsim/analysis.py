"""Curve fits and summary statistics for simulated traces and scans.

Every fitter exists twice: as a scikit-learn style estimator
(``ExponentialDecayFit().fit(t, y).predict(t)``) and as a plain function
returning a :class:`FitResult`.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import least_squares
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import as_1d, check_series, poisson_weights

__all__ = [
    "FitResult",
    "GatingRules",
    "PeakNotFound",
    "ExponentialDecayFit",
    "LorentzianFit",
    "LinearRateFit",
    "RecoveryStepFit",
    "fit_exp_decay",
    "fit_lorentzian",
    "fit_linear",
    "fit_recovery_steps",
    "hist_fwhm",
    "saturation_index",
    "lorentzian",
]

FWHM_PER_SIGMA = 2.0 * math.sqrt(2.0 * math.log(2.0))
MAD_TO_SIGMA = 1.4826
WEIGHTINGS = ("poisson", "irls", "none")
IRLS_PASSES = 20
IRLS_FLOOR = 0.1  # counts; keeps empty background bins from dominating


class PeakNotFound(ValueError):
    """No peak stands out of the edge noise."""


@dataclass
class FitResult:
    params: dict
    std_errors: dict
    residual_rms: float
    converged: bool
    n_points: int
    degenerate: bool = False
    extras: dict = field(default_factory=dict)
    message: str = ""

    def __getitem__(self, name):
        if name in self.params:
            return self.params[name]
        return self.extras[name]

    def report(self, title=""):
        lines = [f"# {title}"] if title else []
        for name, value in self.params.items():
            lines.append(f"{name} = {value:.10g} ± {self.std_errors.get(name, float('nan')):.3g}")
        for name, value in self.extras.items():
            lines.append(f"{name} = {value}")
        lines.append(f"residual_rms = {self.residual_rms:.6g}")
        lines.append(f"converged = {str(self.converged).lower()}")
        lines.append(f"degenerate = {str(self.degenerate).lower()}")
        lines.append(f"n_points = {self.n_points}")
        return "\n".join(lines) + "\n"

    def to_dict(self):
        return _jsonable(asdict(self))

    def to_json(self, **kwargs):
        return json.dumps(self.to_dict(), sort_keys=True, **kwargs)

    @classmethod
    def from_json(cls, text):
        data = json.loads(text)
        return cls(**{k: _unjson(v) for k, v in data.items()})


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else str(v)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def _unjson(obj):
    if isinstance(obj, dict):
        return {k: _unjson(v) for k, v in obj.items()}
    if obj in ("nan", "inf", "-inf"):
        return float(obj)
    return obj


@dataclass(frozen=True)
class GatingRules:
    """Acceptance thresholds for per-scan Lorentzian fits.

    ``min_peak_to_bg`` compares the fitted amplitude with the fitted offset,
    floored at one count so near-zero backgrounds do not inflate the ratio.
    """

    min_linewidth: float = 20e6
    min_peak_to_bg: float = 1.0
    max_fit_rms: float = math.inf

    def __post_init__(self):
        if min(self.min_linewidth, self.min_peak_to_bg, self.max_fit_rms) < 0:
            raise ValueError("gating thresholds must be >= 0")

    def check(self, fit):
        """Reason string when ``fit`` is rejected, else ``None``."""
        if not fit.converged:
            return "fit did not converge"
        if fit["fwhm"] < self.min_linewidth:
            return f"linewidth {fit['fwhm'] / 1e6:.1f} MHz below {self.min_linewidth / 1e6:.1f} MHz"
        ratio = fit["amplitude"] / max(fit["offset"], 1.0)
        if ratio < self.min_peak_to_bg:
            return f"peak/background {ratio:.2f} below {self.min_peak_to_bg:g}"
        if fit.residual_rms > self.max_fit_rms:
            return f"fit rms {fit.residual_rms:.3g} above {self.max_fit_rms:g}"
        return None


# --- shared least-squares machinery --------------------------------------------------------

class _CurveFit(RegressorMixin, BaseEstimator):
    param_names = ()
    scale_params = ()  # parameters proportional to y
    min_points = 1

    def _model(self, x, p):
        raise NotImplementedError

    def _jac(self, x, p):
        raise NotImplementedError

    def _initial(self, x, y):
        raise NotImplementedError

    def _bounds(self):
        n = len(self.param_names)
        return np.full(n, -np.inf), np.full(n, np.inf)

    def _prepare(self, x, y):
        return check_series(x, y, self.min_points)

    def _degenerate(self, x, y):
        return None

    def fit(self, x, y):
        x, y = self._prepare(x, y)
        self.n_features_in_ = 1
        degenerate = self._degenerate(x, y)
        if degenerate is not None:
            self.result_ = degenerate
            self.params_ = degenerate.params
            return self
        if self.weighting not in WEIGHTINGS:
            raise ValueError(f"weighting must be one of {WEIGHTINGS}, got '{self.weighting}'")
        weights = poisson_weights(y) if self.weighting != "none" else np.ones_like(y)
        scale = float(np.max(np.abs(y))) or 1.0
        yn = y / scale
        scaled = [name in self.scale_params for name in self.param_names]

        def to_norm(p):
            return np.array([v / scale if s else v for v, s in zip(p, scaled)])

        def from_norm(p):
            return np.array([v * scale if s else v for v, s in zip(p, scaled)])

        p0 = to_norm(self._initial(x, y))
        lo, hi = self._bounds()
        lo, hi = to_norm(lo), to_norm(hi)
        for i in range(p0.size):
            if np.isfinite(lo[i]):
                p0[i] = max(p0[i], lo[i] + 1e-9 * (1.0 + abs(lo[i])))
            if np.isfinite(hi[i]):
                p0[i] = min(p0[i], hi[i] - 1e-9 * (1.0 + abs(hi[i])))
        bounded = np.isfinite(lo).any() or np.isfinite(hi).any()
        # "irls": reweight by 1/model until the weights settle; the fixed point
        # solves the Poisson likelihood equations
        n_pass = IRLS_PASSES if self.weighting == "irls" else 1
        for _ in range(n_pass):
            # normalized weights keep the solver path independent of the count scale
            sol = self._solve(x, yn, np.sqrt(weights / np.max(weights)), p0, lo, hi, bounded)
            mu = self._model(x, sol.x) * scale
            new = 1.0 / np.maximum(mu, IRLS_FLOOR)
            if np.allclose(new, weights, rtol=1e-6, atol=0.0):
                break
            weights = new
            p0 = sol.x
        p = from_norm(sol.x)
        resid = self._model(x, sol.x) * scale - y
        rms = float(np.sqrt(np.mean(resid ** 2)))
        errors = self._std_errors(sol, scale, scaled, x.size)
        converged = bool(sol.success and sol.status > 0 and np.all(np.isfinite(p)))
        result = FitResult(
            params=dict(zip(self.param_names, map(float, p))),
            std_errors=errors,
            residual_rms=rms,
            converged=converged,
            n_points=int(x.size),
            message=str(sol.message),
        )
        self._finish(result, x, y)
        self.result_ = result
        self.params_ = result.params
        return self

    def _solve(self, x, yn, sw, p0, lo, hi, bounded):
        return least_squares(
            lambda p: sw * (self._model(x, p) - yn),
            p0,
            jac=lambda p: sw[:, None] * self._jac(x, p),
            bounds=(lo, hi),
            method="trf" if bounded else "lm",
            xtol=self.xtol,
            ftol=self.xtol,
            gtol=1e-15 if not bounded else 1e-12,
            max_nfev=self.max_iter,
            x_scale="jac",
        )

    def _std_errors(self, sol, scale, scaled, n):
        dof = max(1, n - sol.x.size)
        chi2 = float(np.sum(sol.fun ** 2)) / dof
        try:
            # column scaling keeps pinv from truncating small-unit parameters
            d = np.linalg.norm(sol.jac, axis=0)
            d = np.where(d > 0, d, 1.0)
            js = sol.jac / d
            cov = np.linalg.pinv(js.T @ js) / np.outer(d, d) * chi2
            err = np.sqrt(np.clip(np.diag(cov), 0.0, None))
        except np.linalg.LinAlgError:
            err = np.full(sol.x.size, np.nan)
        err = np.array([e * scale if s else e for e, s in zip(err, scaled)])
        return dict(zip(self.param_names, map(float, err)))

    def _finish(self, result, x, y):
        pass

    def predict(self, x):
        check_is_fitted(self, "params_")
        x = as_1d(x, "x")
        return self._evaluate(x, self.params_)

    def _evaluate(self, x, params):
        p = np.array([params[name] for name in self.param_names])
        return self._model(x, p)


# --- exponential decay -----------------------------------------------------------------

class ExponentialDecayFit(_CurveFit):
    """``y = amplitude * exp(-rate * t) + offset``.

    Starts from a log-linear fit of ``y - min(y)``; convergence means a
    relative step below ``xtol`` within ``max_iter`` evaluations.
    """

    param_names = ("rate", "amplitude", "offset")
    scale_params = ("amplitude", "offset")
    min_points = 5

    def __init__(self, weighting="poisson", xtol=1e-8, max_iter=200):
        self.weighting = weighting
        self.xtol = xtol
        self.max_iter = max_iter

    def _prepare(self, x, y):
        return check_series(x, y, self.min_points, strictly_increasing=True)

    def _model(self, t, p):
        k, a, c = p
        return a * np.exp(-k * (t - self.t0_)) + c

    def _jac(self, t, p):
        k, a, _ = p
        e = np.exp(-k * (t - self.t0_))
        return np.column_stack([-a * (t - self.t0_) * e, e, np.ones_like(t)])

    def _degenerate(self, t, y):
        self.t0_ = float(t[0])
        if np.ptp(y) <= 1e-12 * max(1.0, float(np.max(np.abs(y)))):
            return FitResult(
                params={"rate": 0.0, "amplitude": 0.0, "offset": float(np.mean(y))},
                std_errors={"rate": 0.0, "amplitude": 0.0, "offset": 0.0},
                residual_rms=float(np.std(y)), converged=True, n_points=int(t.size),
                degenerate=True, message="constant data",
            )
        return None

    def _initial(self, t, y):
        span = t[-1] - t[0]
        c0 = float(np.min(y))
        shifted = y - c0
        keep = shifted > 0.05 * np.max(shifted)
        if keep.sum() >= 2:
            slope, intercept = np.polyfit(t[keep] - self.t0_, np.log(shifted[keep]), 1)
            k0 = -slope
            a0 = math.exp(intercept)
        else:
            k0, a0 = 1.0 / span, float(np.ptp(y))
        if not np.isfinite(k0) or k0 <= 0:
            k0 = 1.0 / span
        # the log-linear guess overestimates the floor; back off the offset a little
        return np.array([k0, a0, c0 - 0.05 * a0 * math.exp(-k0 * span)])

    def _finish(self, result, t, y):
        # amplitude refers to t = t[0]; report it at t = 0
        k = result.params["rate"]
        shift = math.exp(k * self.t0_)
        result.params["amplitude"] *= shift
        result.std_errors["amplitude"] *= shift
        self.t0_ = 0.0

    def _evaluate(self, t, params):
        return params["amplitude"] * np.exp(-params["rate"] * t) + params["offset"]


# --- Lorentzian ------------------------------------------------------------------------

def lorentzian(f, center, fwhm, amplitude, offset):
    hw2 = (0.5 * fwhm) ** 2
    return amplitude * hw2 / ((f - center) ** 2 + hw2) + offset


class LorentzianFit(_CurveFit):
    """``y = amplitude * (w/2)^2 / ((f - center)^2 + (w/2)^2) + offset``."""

    param_names = ("center", "fwhm", "amplitude", "offset")
    scale_params = ("amplitude", "offset")
    min_points = 7

    def __init__(self, weighting="poisson", xtol=1e-8, max_iter=200, edge_fraction=0.2):
        self.weighting = weighting
        self.xtol = xtol
        self.max_iter = max_iter
        self.edge_fraction = edge_fraction

    def _prepare(self, f, y):
        f, y = check_series(f, y, self.min_points)
        order = np.argsort(f, kind="stable")
        return f[order], y[order]

    def _edges(self, y):
        n = max(2, int(round(self.edge_fraction * y.size)))
        return np.concatenate([y[:n], y[-n:]])

    def _initial(self, f, y):
        edges = self._edges(y)
        c0 = float(np.median(edges))
        i = int(np.argmax(y))
        a0 = float(y[i] - c0)
        half = c0 + 0.5 * a0
        above = np.nonzero(y >= half)[0]
        width = float(f[above[-1]] - f[above[0]]) if above.size > 1 else 0.0
        step = float(np.min(np.diff(f))) if f.size > 1 else 1.0
        width = max(width, 2.0 * step)
        return np.array([float(f[i]), width, a0, c0])

    def _degenerate(self, f, y):
        edges = self._edges(y)
        noise = float(np.std(np.diff(edges))) / math.sqrt(2.0)
        if float(np.max(y) - np.median(y)) <= 3.0 * noise:
            raise PeakNotFound(
                f"peak height {np.max(y) - np.median(y):.3g} is within 3x edge noise {noise:.3g}"
            )
        return None

    def _bounds(self):
        return np.array([-np.inf, 0.0, -np.inf, -np.inf]), np.full(4, np.inf)

    def _model(self, f, p):
        return lorentzian(f, *p)

    def _jac(self, f, p):
        c, w, a, _ = p
        hw2 = (0.5 * w) ** 2
        d = f - c
        den = d ** 2 + hw2
        shape = hw2 / den
        d_center = a * hw2 * 2.0 * d / den ** 2
        d_fwhm = a * (0.5 * w) * d ** 2 / den ** 2
        return np.column_stack([d_center, d_fwhm, shape, np.ones_like(f)])


# --- linear ----------------------------------------------------------------------------

class LinearRateFit(RegressorMixin, BaseEstimator):
    """Ordinary least squares ``y = slope * x + intercept`` with standard errors."""

    def __init__(self, fit_intercept=True):
        self.fit_intercept = fit_intercept

    def fit(self, x, y):
        x = as_1d(x, "x")
        y = as_1d(y, "y")
        if x.shape != y.shape:
            raise ValueError("x and y lengths differ")
        self.n_features_in_ = 1
        n = x.size
        if n == 0:
            raise ValueError("need at least 1 point")
        if np.ptp(x) == 0:
            nan = float("nan")
            self.result_ = FitResult(
                params={"slope": nan, "intercept": float(np.mean(y))},
                std_errors={"slope": nan, "intercept": nan},
                residual_rms=float(np.std(y)), converged=False, n_points=n,
                degenerate=True, extras={"r_squared": nan}, message="all x values are equal",
            )
            self.params_ = self.result_.params
            return self
        if n < 3:
            raise ValueError(f"need at least 3 points, got {n}")
        xm, ym = x.mean(), y.mean()
        sxx = float(np.sum((x - xm) ** 2))
        slope = float(np.sum((x - xm) * (y - ym)) / sxx)
        intercept = float(ym - slope * xm)
        resid = y - (slope * x + intercept)
        ss_res = float(np.sum(resid ** 2))
        ss_tot = float(np.sum((y - ym) ** 2))
        s2 = ss_res / (n - 2)
        se_slope = math.sqrt(s2 / sxx)
        se_int = math.sqrt(s2 * (1.0 / n + xm ** 2 / sxx))
        r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
        self.result_ = FitResult(
            params={"slope": slope, "intercept": intercept},
            std_errors={"slope": se_slope, "intercept": se_int},
            residual_rms=math.sqrt(ss_res / n), converged=True, n_points=n,
            extras={"r_squared": r2},
        )
        self.params_ = self.result_.params
        return self

    def predict(self, x):
        check_is_fitted(self, "params_")
        return self.params_["slope"] * as_1d(x) + self.params_["intercept"]


# --- geometric recovery ----------------------------------------------------------------

def saturation_index(q, fraction=0.95):
    """First pulse index ``n`` with ``1 - (1 - q)^n >= fraction``."""
    if q >= 1.0:
        return 1
    if q <= 0.0:
        return None
    return max(1, int(math.ceil(math.log(1.0 - fraction) / math.log(1.0 - q) - 1e-9)))


class RecoveryStepFit(_CurveFit):
    """``counts_n = saturation_level * (1 - (1 - q)^n) + offset`` for ``n = first_index, ...``.

    ``q`` is the recovered fraction per green pulse.
    """

    param_names = ("rate_per_pulse", "saturation_level", "offset")
    scale_params = ("saturation_level", "offset")
    min_points = 3

    def __init__(self, weighting="poisson", xtol=1e-10, max_iter=200, first_index=1):
        self.weighting = weighting
        self.xtol = xtol
        self.max_iter = max_iter
        self.first_index = first_index

    def fit(self, block_counts, y=None):
        if y is None:
            y = as_1d(block_counts, "block_counts")
            x = self.first_index + np.arange(y.size, dtype=float)
        else:
            x = block_counts
        return super().fit(x, y)

    def _bounds(self):
        return np.array([0.0, -np.inf, -np.inf]), np.array([1.0, np.inf, np.inf])

    def _degenerate(self, n, y):
        if np.ptp(y) <= 1e-12 * max(1.0, float(np.max(np.abs(y)))):
            return FitResult(
                params={"rate_per_pulse": 1.0, "saturation_level": float(np.mean(y)), "offset": 0.0},
                std_errors={"rate_per_pulse": 0.0, "saturation_level": 0.0, "offset": 0.0},
                residual_rms=0.0, converged=True, n_points=int(n.size), degenerate=True,
                extras={"saturation_index": 1}, message="flat data: saturated from the first pulse",
            )
        return None

    def _initial(self, n, y):
        d = np.diff(y)
        good = d > 0
        q0 = 0.3
        if good.sum() >= 2:
            idx = np.nonzero(good)[0]
            slope = np.polyfit(idx, np.log(d[good]), 1)[0]
            if np.isfinite(slope) and slope < 0:
                q0 = float(np.clip(1.0 - math.exp(slope), 0.02, 0.98))
        total = float(y[-1] - y[0]) / max(1e-12, (1 - q0) ** n[0] - (1 - q0) ** n[-1])
        offset = float(y[0] - total * (1 - (1 - q0) ** n[0]))
        return np.array([q0, total, offset])

    def _model(self, n, p):
        q, s, c = p
        return s * (1.0 - (1.0 - q) ** n) + c

    def _jac(self, n, p):
        q, s, _ = p
        base = np.clip(1.0 - q, 0.0, None)
        dq = s * n * base ** (n - 1.0)
        return np.column_stack([dq, 1.0 - base ** n, np.ones_like(n)])

    def _finish(self, result, n, y):
        result.extras["saturation_index"] = saturation_index(result.params["rate_per_pulse"])


# --- functional wrappers -----------------------------------------------------------------

def fit_exp_decay(t, y, weighting="poisson"):
    return ExponentialDecayFit(weighting=weighting).fit(t, y).result_


def fit_lorentzian(f, y, weighting="poisson"):
    return LorentzianFit(weighting=weighting).fit(f, y).result_


def fit_linear(x, y):
    return LinearRateFit().fit(x, y).result_


def fit_recovery_steps(block_counts, weighting="poisson", first_index=1):
    return RecoveryStepFit(weighting=weighting, first_index=first_index).fit(block_counts).result_


def hist_fwhm(values):
    """Robust histogram width: ``2 sqrt(2 ln 2) * 1.4826 * MAD``.

    Used for every center/linewidth distribution comparison.
    """
    values = as_1d(values, "values")
    if values.size < 10:
        raise ValueError(f"need at least 10 values, got {values.size}")
    mad = float(np.median(np.abs(values - np.median(values))))
    return FWHM_PER_SIGMA * MAD_TO_SIGMA * mad
