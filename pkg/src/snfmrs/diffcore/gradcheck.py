"""Central finite-difference checks of analytic gradients."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    step: float
    failing: list[int] = field(default_factory=list)
    analytic: list[float] = field(default_factory=list)
    numeric: list[float] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def to_json(self) -> str:
        d = asdict(self)
        d["passed"] = self.passed
        return json.dumps(d, sort_keys=True)


def numeric_gradient(fun: Callable[[np.ndarray], float], x: np.ndarray, step: float = 1e-6) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    flat = x.reshape(-1)
    out = np.empty(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = fun(x)
        flat[i] = orig - step
        fm = fun(x)
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * step)
    return out.reshape(x.shape)


def relative_errors(analytic, numeric, floor: float = 0.0) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor), elementwise; 0 where both vanish."""
    a = np.ravel(analytic)
    n = np.ravel(numeric)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    diff = np.abs(a - n)
    return np.divide(diff, denom, out=np.zeros_like(diff), where=denom > 0)


def finite_diff_check(fun: Callable[[np.ndarray], float], grad: Callable[[np.ndarray], np.ndarray],
                      x, step: float = 1e-6, tolerance: float = 1e-6,
                      floor: float = 0.0, keep_values: bool = False) -> GradCheckReport:
    """Compare ``grad(x)`` against central differences of ``fun``.

    ``floor`` bounds the denominator of the relative error from below so that
    coordinates whose true derivative is zero do not divide rounding noise by
    rounding noise.
    """
    x = np.asarray(x, dtype=np.float64)
    a = np.asarray(grad(x.copy()), dtype=np.float64).reshape(-1)
    n = numeric_gradient(fun, x, step).reshape(-1)
    rel = relative_errors(a, n, floor)
    failing = [int(i) for i in np.flatnonzero(rel >= tolerance)]
    report = GradCheckReport(float(rel.max(initial=0.0)), tolerance, step, failing)
    if keep_values:
        report.analytic = a.tolist()
        report.numeric = n.tolist()
    return report
