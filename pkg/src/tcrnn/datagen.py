"""Synthetic 1D elasto-plastic data with linear kinematic hardening.

Free energy ``F = E/2 (eps - eps_p)^2 + H/2 eps_p^2`` gives
``sigma = E (eps - eps_p)`` and ``D = (sigma - H eps_p) * eps_p_dot``.
Paths are integrated with a radial return, which makes each step's
dissipation increment ``k * dgamma >= 0`` exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np


@dataclass(frozen=True)
class ElastoPlasticParams:
    E: float = 100e9
    H: float = 100e9
    k: float = 100e6

    def __post_init__(self):
        if not (self.E > 0 and self.H >= 0 and self.k > 0):
            raise ValueError("need E > 0, H >= 0 and k > 0")


@dataclass(frozen=True)
class LoadingProgram:
    """Piecewise-linear strain program: ``(target strain, |increment|)`` segments."""

    segments: tuple[tuple[float, float], ...]
    start: float = 0.0

    def __post_init__(self):
        if not self.segments:
            raise ValueError("loading program has no segments")
        for _, inc in self.segments:
            if not inc > 0:
                raise ValueError("strain increments must be positive")

    @classmethod
    def cyclic(cls, cycles: int, loading_strain: float, unloading_strain: float,
               increment: float) -> "LoadingProgram":
        """Each cycle loads by ``loading_strain`` then unloads by ``unloading_strain``."""
        if cycles < 1:
            raise ValueError("a cyclic program needs at least one cycle")
        segs, eps = [], 0.0
        for _ in range(cycles):
            eps += loading_strain
            segs.append((eps, increment))
            eps -= unloading_strain
            segs.append((eps, increment))
        return cls(tuple(segs))

    def strains(self) -> np.ndarray:
        """Strain at every step; the last substep of a segment is snapped to its target."""
        out = [self.start]
        eps = self.start
        for target, inc in self.segments:
            span = target - eps
            n = int(np.ceil(abs(span) / inc - 1e-9))
            for i in range(1, n):
                out.append(eps + np.sign(span) * inc * i)
            if n:
                out.append(target)
            eps = target
        return np.asarray(out)


@dataclass
class MaterialPath:
    """One loading path. Stress-like columns are ``(N, d)``; scalars are ``(N,)``.

    ``input_stress`` holds a perturbed copy of the stress used only as
    history input during training; it is None for clean paths.
    ``dissipation`` is a rate per unit of the ``time`` axis.
    """

    strain: np.ndarray
    stress: np.ndarray
    time: Optional[np.ndarray] = None
    temperature: Optional[np.ndarray] = None
    free_energy: Optional[np.ndarray] = None
    dissipation: Optional[np.ndarray] = None
    entropy: Optional[np.ndarray] = None
    reference_isv: Optional[np.ndarray] = None
    input_stress: Optional[np.ndarray] = None
    name: str = "path"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.strain = _col2(self.strain)
        self.stress = _col2(self.stress)
        n = len(self.strain)
        if self.time is None:
            self.time = np.arange(n, dtype=np.float64)
        self.time = np.asarray(self.time, dtype=np.float64)
        for name in ("temperature", "free_energy", "dissipation", "entropy"):
            v = getattr(self, name)
            if v is not None:
                setattr(self, name, np.asarray(v, dtype=np.float64).reshape(n))
        if self.reference_isv is not None:
            self.reference_isv = _col2(self.reference_isv)
        if self.input_stress is not None:
            self.input_stress = _col2(self.input_stress)
        if n < 2:
            raise ValueError("a path needs at least two steps")
        for name in ("stress", "time", "temperature", "free_energy", "dissipation",
                     "entropy", "reference_isv", "input_stress"):
            v = getattr(self, name)
            if v is not None and len(v) != n:
                raise ValueError(f"column {name!r} has {len(v)} rows, expected {n}")
        if self.stress.shape[1] != self.strain.shape[1]:
            raise ValueError("stress and strain dimensions differ")
        if np.any(np.diff(self.time) <= 0):
            raise ValueError("time must be strictly increasing")

    def __len__(self) -> int:
        return len(self.strain)

    @property
    def dim(self) -> int:
        return self.strain.shape[1]

    @property
    def history_stress(self) -> np.ndarray:
        return self.stress if self.input_stress is None else self.input_stress


def _col2(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x[:, None] if x.ndim == 1 else x


def return_map_step(params: ElastoPlasticParams, eps: float, eps_p: float, d_eps: float):
    """One radial-return step from ``(eps, eps_p)``.

    Returns ``(sigma, eps_p_new, dissipation_increment, free_energy)``.
    """
    E, H, k = params.E, params.H, params.k
    eps_new = eps + d_eps
    sig_trial = E * (eps_new - eps_p)
    xi = sig_trial - H * eps_p
    f = abs(xi) - k
    if f <= 0:
        eps_p_new = eps_p
    else:
        eps_p_new = eps_p + f / (E + H) * np.sign(xi)
    sigma = E * (eps_new - eps_p_new)
    diss = (sigma - H * eps_p_new) * (eps_p_new - eps_p)
    energy = 0.5 * E * (eps_new - eps_p_new) ** 2 + 0.5 * H * eps_p_new ** 2
    return sigma, eps_p_new, diss, energy


def generate_path(params: ElastoPlasticParams, program: LoadingProgram,
                  name: str = "path") -> MaterialPath:
    strains = program.strains()
    n = len(strains)
    if n < 2:
        raise ValueError("loading program produces fewer than two steps")
    sig = np.zeros(n)
    eps_p = np.zeros(n)
    diss = np.zeros(n)
    energy = np.zeros(n)
    s0, p0, _, f0 = return_map_step(params, 0.0, 0.0, strains[0])
    sig[0], eps_p[0], energy[0] = s0, p0, f0
    for i in range(1, n):
        sig[i], eps_p[i], diss[i], energy[i] = return_map_step(
            params, strains[i - 1], eps_p[i - 1], strains[i] - strains[i - 1])
    return MaterialPath(strain=strains, stress=sig, free_energy=energy, dissipation=diss,
                        reference_isv=eps_p, name=name)


def perturb_stress(path: MaterialPath, r: float, seed: int) -> MaterialPath:
    """Copy with Gaussian noise of std ``r * max|stress|`` on the history-input column."""
    if r < 0:
        raise ValueError("noise ratio must be non-negative")
    if r == 0:
        return replace(path, input_stress=None)
    rng = np.random.default_rng(seed)
    scale = r * np.max(np.abs(path.stress))
    noise = rng.normal(0.0, 1.0, size=path.stress.shape) * scale
    return replace(path, input_stress=path.stress + noise)


def augment_time_consistency(dataset: Sequence[MaterialPath], stride: int) -> list[MaterialPath]:
    """Insert a zero-increment copy after every ``stride``-th step (never after the last).

    The copy has the same strain, stress and energy and zero dissipation. It
    is given a unit time step and every later time is shifted by one unit.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    out = []
    for path in dataset:
        n = len(path)
        dup = [i for i in range(n - 1) if (i + 1) % stride == 0]
        if not dup:
            out.append(path)
            continue
        order = np.sort(np.concatenate([np.arange(n), np.asarray(dup)]))
        is_copy = np.zeros(len(order), dtype=bool)
        is_copy[1:] = order[1:] == order[:-1]
        dt = np.diff(path.time)[np.maximum(order[1:] - 1, 0)]
        dt[is_copy[1:]] = 1.0
        time = np.concatenate([[path.time[0]], path.time[0] + np.cumsum(dt)])

        def take(col):
            return None if col is None else col[order]

        diss = take(path.dissipation)
        if diss is not None:
            diss[is_copy] = 0.0
        out.append(replace(
            path, strain=path.strain[order], stress=path.stress[order], time=time,
            temperature=take(path.temperature), free_energy=take(path.free_energy),
            dissipation=diss, entropy=take(path.entropy), reference_isv=take(path.reference_isv),
            input_stress=take(path.input_stress),
        ))
    return out


BENCHMARK_INCREMENTS = (3.75e-5, 4.29e-5, 5e-5, 6e-5, 7.5e-5)


def benchmark_dataset(params: ElastoPlasticParams = ElastoPlasticParams(), cycles: int = 2,
                  loading_strain: float = 1e-2, unloading_strain: float = 5e-3,
                  increments: Sequence[float] = BENCHMARK_INCREMENTS) -> list[MaterialPath]:
    """Same cyclic path sampled at several strain increments."""
    out = []
    for inc in increments:
        prog = LoadingProgram.cyclic(cycles, loading_strain, unloading_strain, inc)
        path = generate_path(params, prog, name=f"de_{inc:.3g}")
        path.meta["strain_increment"] = float(inc)
        out.append(path)
    return out
