"""Per-feature standardization statistics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

GROUPS = ("strain", "stress", "temperature", "free_energy", "dissipation", "entropy", "isv",
          "strain_increment", "stress_increment")


class ConstantColumnError(ValueError):
    pass


@dataclass
class StandardizationStats:
    """Mean and population standard deviation per component, per feature group."""

    mean: dict[str, np.ndarray] = field(default_factory=dict)
    std: dict[str, np.ndarray] = field(default_factory=dict)

    def has(self, group: str) -> bool:
        return group in self.mean

    def set(self, group: str, mean, std) -> None:
        mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
        std = np.atleast_1d(np.asarray(std, dtype=np.float64))
        if np.any(std <= 0) or not np.all(np.isfinite(std)):
            raise ConstantColumnError(f"constant column in group {group!r}")
        self.mean[group] = mean
        self.std[group] = std

    def fit_group(self, group: str, columns: np.ndarray) -> None:
        """``columns`` is ``(n_samples,)`` or ``(n_samples, n_components)``."""
        x = np.asarray(columns, dtype=np.float64)
        if x.ndim == 1:
            x = x[:, None]
        mean = x.mean(axis=0)
        std = x.std(axis=0)
        bad = np.flatnonzero(std <= 1e-12 * np.abs(mean))
        if bad.size:
            raise ConstantColumnError(f"constant column: {group}_{bad[0]}")
        self.set(group, mean, std)

    def standardize(self, group: str, x) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean[group]) / self.std[group]

    def destandardize(self, group: str, x) -> np.ndarray:
        return np.asarray(x, dtype=np.float64) * self.std[group] + self.mean[group]

    def scalar(self, group: str) -> tuple[float, float]:
        return float(self.mean[group][0]), float(self.std[group][0])

    def to_dict(self) -> dict:
        return {k: {"mean": self.mean[k].tolist(), "std": self.std[k].tolist()}
                for k in sorted(self.mean)}

    @classmethod
    def from_dict(cls, data: dict) -> "StandardizationStats":
        out = cls()
        for k, v in data.items():
            if k not in GROUPS:
                raise ValueError(f"unknown stats group {k!r}")
            out.set(k, v["mean"], v["std"])
        return out
