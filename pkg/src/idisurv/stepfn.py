"""Right-continuous piecewise-constant functions of time."""

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True, eq=False)
class StepFunction:
    """Right-continuous step function.

    ``f(t)`` is ``values[k]`` for the last knot ``knots[k] <= t`` and
    ``initial_value`` before the first knot. Used for survival curves,
    cumulative hazards and discrete CDFs alike.

    Parameters
    ----------
    knots : array_like
        Strictly increasing jump locations.
    values : array_like
        Value taken from each knot onwards.
    initial_value : float
        Value to the left of the first knot.
    """

    knots: np.ndarray
    values: np.ndarray
    initial_value: float = 0.0

    def __post_init__(self):
        knots = np.asarray(self.knots, dtype=float).reshape(-1)
        values = np.asarray(self.values, dtype=float).reshape(-1)
        if knots.shape != values.shape:
            raise ValueError("knots and values must have the same length")
        if knots.size > 1 and np.any(np.diff(knots) <= 0):
            raise ValueError("knots must be strictly increasing")
        knots.setflags(write=False)
        values.setflags(write=False)
        object.__setattr__(self, "knots", knots)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "initial_value", float(self.initial_value))

    def _lookup(self, t, side):
        t = np.asarray(t, dtype=float)
        idx = np.searchsorted(self.knots, t, side=side) - 1
        table = np.concatenate(([self.initial_value], self.values))
        out = table[idx + 1]
        return out if out.ndim else float(out)

    def __call__(self, t):
        return self._lookup(t, "right")

    def left_limit(self, t):
        """Evaluate ``f(t-)``, the limit from the left."""
        return self._lookup(t, "left")

    @property
    def jumps(self):
        """Signed jump sizes at each knot."""
        prev = np.concatenate(([self.initial_value], self.values[:-1]))
        return self.values - prev

    @property
    def final_value(self):
        return float(self.values[-1]) if self.values.size else self.initial_value

    def __len__(self):
        return self.knots.size

    def __repr__(self):
        return (f"StepFunction(n_knots={self.knots.size}, "
                f"initial_value={self.initial_value}, final_value={self.final_value})")
