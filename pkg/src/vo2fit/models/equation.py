"""Non-exercise VO2max estimate from age and resting heart rate."""
from __future__ import annotations

import numpy as np

from vo2fit.errors import DataError

UTH_FACTOR = 15.0


def tanaka_hrmax(age):
    return 208.0 - 0.7 * np.asarray(age, float)


def equation_estimate(age, rhr):
    """15 * HRmax / HRrest in ml O2/min/kg, with HRmax = 208 - 0.7 * age."""
    rhr = np.asarray(rhr, float)
    if np.any(~(rhr > 0)):
        raise DataError("resting heart rate must be positive")
    out = UTH_FACTOR * tanaka_hrmax(age) / rhr
    return float(out) if out.ndim == 0 else out


def equation_baseline(p) -> float:
    if p.age is None or p.rhr is None:
        raise DataError(f"{p.id}: age and rhr required")
    return equation_estimate(p.age, p.rhr)
