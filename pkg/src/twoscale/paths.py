"""Time-discrete paths of the slow variable."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Path:
    """Piecewise-linear path: values[j] is the state at times[j].

    times must be strictly increasing; values has shape (len(times), n).
    """

    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if v.ndim == 1:
            v = v[:, None]
        if t.ndim != 1 or len(t) < 2:
            raise ValueError("a path needs at least two time points")
        if np.any(np.diff(t) <= 0):
            raise ValueError("path times must be strictly increasing")
        if v.shape[0] != t.shape[0]:
            raise ValueError("times and values length mismatch")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)

    @property
    def n(self) -> int:
        return self.values.shape[1]

    @classmethod
    def constant(cls, times, x0) -> "Path":
        times = np.asarray(times, dtype=float)
        x0 = np.atleast_1d(np.asarray(x0, dtype=float))
        return cls(times, np.tile(x0, (len(times), 1)))

    def __call__(self, t) -> np.ndarray:
        """Linear interpolation at time(s) t."""
        t = np.asarray(t, dtype=float)
        out = np.stack([np.interp(t, self.times, self.values[:, i])
                        for i in range(self.n)], axis=-1)
        return out

    def derivative(self) -> np.ndarray:
        """Time derivative at the path's own nodes, shape (len(times), n).

        Centered differences in the interior, one-sided at the ends; a
        constant path gets an exactly zero derivative.
        """
        return np.gradient(self.values, self.times, axis=0)

    def with_values(self, values) -> "Path":
        return Path(self.times.copy(), np.asarray(values, dtype=float))
