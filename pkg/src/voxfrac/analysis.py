"""Post-processing of reaction curves and crack volumes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage


@dataclass
class CurveStructure:
    """Landmarks of a reaction curve with an early partial and a late total failure."""

    first_drop: int | None    # index of the local maximum that starts the first drop
    first_drop_rel: float     # relative size of that drop
    recovered: bool           # force later exceeds the level before the first drop
    peak: int                 # index of the global maximum
    residual: float           # mean force over the trailing window
    residual_rel: float       # residual / peak force

    @property
    def two_drops(self) -> bool:
        return (self.first_drop is not None and self.recovered and self.first_drop < self.peak)


def trailing_mean(Q, window: int) -> float:
    Q = np.asarray(Q, dtype=float)
    return float(Q[-window:].mean()) if len(Q) else 0.0


def curve_structure(Q, min_drop: float = 0.2, window: int = 40) -> CurveStructure:
    """Locate the first drop of at least ``min_drop`` relative to the running maximum.

    After a total failure an undamped free fragment keeps ringing, so the
    residual load is the mean over the last ``window`` values rather than
    the last value.
    """
    Q = np.asarray(Q, dtype=float)
    peak = int(np.argmax(Q))
    first, rel = None, 0.0
    run_max, run_idx = -np.inf, 0
    for k, q in enumerate(Q[:peak + 1]):
        if q > run_max:
            run_max, run_idx = q, k
        elif run_max > 0 and q < (1 - min_drop) * run_max:
            first, rel = run_idx, float(1 - q / run_max)
            break
    recovered = first is not None and Q[peak] > Q[first]
    res = trailing_mean(Q, window)
    return CurveStructure(first, rel, bool(recovered), peak, res, float(res / Q[peak]) if Q[peak] > 0 else np.inf)


def separates(mask: np.ndarray, axis: int = 0) -> bool:
    """True when no face-connected path of intact voxels joins the two faces normal to ``axis``."""
    lab, _ = ndimage.label(~np.asarray(mask, dtype=bool))
    lo = set(np.unique(np.take(lab, 0, axis=axis))) - {0}
    hi = set(np.unique(np.take(lab, -1, axis=axis))) - {0}
    return not (lo & hi)
