"""Open-loop evaluation, error metrics, ISV correlation and parametric sweeps."""

from __future__ import annotations

import time
import zlib
from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.stats import rankdata

from .datagen import MaterialPath
from .nets import SequenceWindow
from .pipeline import BaselineModel, TrainConfig, make_windows, path_rates, train
from .thermo import TcrnnModel, forward_all, predict_stress

AXES = ("rnn_steps", "isv_dim", "hidden_dim", "strain_increment")


def relative_error(data, pred) -> float:
    """``||data - pred|| / ||data||`` over all steps and components."""
    data = np.asarray(data, dtype=np.float64).reshape(-1)
    pred = np.asarray(pred, dtype=np.float64).reshape(-1)
    if data.shape != pred.shape:
        raise ValueError("data and prediction lengths differ")
    norm = np.linalg.norm(data)
    if norm == 0:
        raise ValueError("relative error undefined for all-zero data")
    return float(np.linalg.norm(data - pred) / norm)


def spearman(x, y) -> float:
    """Spearman rank correlation with average ranks for ties."""
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    y = np.asarray(y, dtype=np.float64).reshape(-1)
    if x.shape != y.shape:
        raise ValueError("sequences must have equal length")
    if x.size < 3:
        raise ValueError("need at least 3 samples")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        raise ValueError("Spearman correlation undefined for a constant sequence")
    rx, ry = rankdata(x), rankdata(y)
    rx -= rx.mean()
    ry -= ry.mean()
    return float(np.clip(rx @ ry / np.sqrt((rx @ rx) * (ry @ ry)), -1.0, 1.0))


@dataclass
class Rollout:
    stress: np.ndarray
    free_energy: Optional[np.ndarray] = None
    dissipation: Optional[np.ndarray] = None
    isv: Optional[np.ndarray] = None


def _window_at(n: int, s: int, strain, fed_stress, temperature=None) -> SequenceWindow:
    idx = np.maximum(np.arange(n - s + 1, n + 1), 0)
    temp = None if temperature is None else temperature[idx][None]
    return SequenceWindow(strain[idx][None], fed_stress[idx[:-1]][None], temp)


def _rollout(n_steps: int, s: int, initial_stress: np.ndarray, step_fn) -> np.ndarray:
    """Shared open-loop driver.

    ``fed`` holds the stress sequence the model sees as history: the given
    initial stresses for the first ``s-1`` steps, its own predictions after.
    ``step_fn(n, fed)`` predicts step ``n`` from ``fed[:n]``.
    """
    d = initial_stress.shape[1]
    n_init = len(initial_stress)
    fed = np.zeros((n_steps, d))
    fed[:n_init] = initial_stress
    pred = np.zeros((n_steps, d))
    for n in range(n_steps):
        pred[n] = step_fn(n, fed)
        if n >= n_init:
            fed[n] = pred[n]
    return pred


def _as_rows(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x[:, None] if x.ndim == 1 else x


def _pad_to(x: np.ndarray, n: int) -> np.ndarray:
    """Repeat the last row until ``x`` has ``n`` rows."""
    if len(x) >= n:
        return x
    return np.concatenate([x, np.repeat(x[-1:], n - len(x), axis=0)])


def _pad_time(t: np.ndarray, n: int) -> np.ndarray:
    if len(t) >= n:
        return t
    step = t[-1] - t[-2]
    return np.concatenate([t, t[-1] + step * np.arange(1, n - len(t) + 1)])


def _backward_rates(x: np.ndarray, t: np.ndarray, idx: np.ndarray) -> np.ndarray:
    """Backward-difference rates of ``x`` (B, N, ...) at step indices ``idx``; 0 at step 0."""
    prev = np.maximum(idx - 1, 0)
    dt = t[:, idx] - t[:, prev]
    dt = np.where(idx == 0, 1.0, dt)
    dx = x[:, idx] - x[:, prev]
    if dx.ndim == 3:
        dt = dt[..., None]
    return dx / dt


def rollout_paths(model: TcrnnModel, strains: Sequence, initial_histories: Sequence,
                  time_axes: Optional[Sequence] = None, temperatures: Optional[Sequence] = None,
                  traces: bool = True) -> list[Rollout]:
    """Open-loop rollout of several strain sequences in one batch.

    Shorter sequences are padded by repeating their last step; padded steps
    are dropped from the results.
    """
    strains = [_as_rows(e) for e in strains]
    b, s = len(strains), model.rnn_steps
    if b == 0:
        return []
    lengths = [len(e) for e in strains]
    if min(lengths) < max(s, 2):
        raise ValueError(f"strain sequences need at least {max(s, 2)} steps")
    d = strains[0].shape[1]
    inits = [np.asarray(h, dtype=np.float64).reshape(-1, d) for h in initial_histories]
    if len(inits) != b:
        raise ValueError("one initial history per strain sequence is required")
    for h in inits:
        if len(h) != s - 1:
            raise ValueError(f"initial history needs {s - 1} stress rows, got {len(h)}")
    n = max(lengths)
    if time_axes is None:
        time_axes = [None] * b
    times = [np.arange(len(e), dtype=np.float64) if t is None else np.asarray(t, float)
             for e, t in zip(strains, time_axes)]
    E = np.stack([_pad_to(e, n) for e in strains])
    T = np.stack([_pad_time(t, n) for t in times])
    temp = None
    if temperatures is not None:
        temp = np.stack([_pad_to(np.asarray(x, float), n) for x in temperatures])

    fed = np.zeros((b, n, d))
    for k, h in enumerate(inits):
        fed[k, :s - 1] = h
    pred = np.zeros((b, n, d))
    energy, diss, isv = np.zeros((b, n)), np.zeros((b, n)), np.zeros((b, n, model.isv_dim))
    for i in range(n):
        idx = np.maximum(np.arange(i - s + 1, i + 1), 0)
        w = SequenceWindow(E[:, idx], fed[:, idx[:-1]], None if temp is None else temp[:, idx])
        if traces:
            rates = None
            if model.variant == "rate":
                rates = SequenceWindow(
                    _backward_rates(E, T, idx), _backward_rates(fed, T, idx[:-1]),
                    None if temp is None else _backward_rates(temp, T, idx))
            dt = T[:, i] - T[:, i - 1] if i else T[:, 1] - T[:, 0]
            out = forward_all(model, w, dt=dt, rates=rates)
            pred[:, i] = out.stress
            energy[:, i], diss[:, i], isv[:, i] = out.free_energy, out.dissipation, out.isv
        else:
            pred[:, i] = predict_stress(model, w)
        if i >= s - 1:
            fed[:, i] = pred[:, i]
    if not traces:
        return [Rollout(pred[k, :m]) for k, m in enumerate(lengths)]
    return [Rollout(pred[k, :m], energy[k, :m], diss[k, :m], isv[k, :m])
            for k, m in enumerate(lengths)]


def open_loop_rollout(model: TcrnnModel, strain, initial_history, time_axis=None,
                      temperature=None, traces: bool = True) -> Rollout:
    """Roll a model over a strain sequence feeding back its own stresses.

    ``initial_history`` holds the true stresses of the first ``rnn_steps - 1``
    steps (zeros may be passed instead). Every step, including those early
    ones, gets a prediction; early windows repeat the first step as history.
    """
    return rollout_paths(model, [strain], [initial_history], [time_axis],
                         None if temperature is None else [temperature], traces)[0]


def baseline_rollout(model: BaselineModel, strain, initial_history) -> np.ndarray:
    """Open-loop stress sequence of a total or incremental baseline."""
    strain = np.asarray(strain, dtype=np.float64)
    strain = strain[:, None] if strain.ndim == 1 else strain
    s = model.rnn_steps
    init = np.asarray(initial_history, dtype=np.float64).reshape(-1, strain.shape[1])

    def step(i, fed):
        w = _window_at(i, s, strain, fed)
        if model.form == "incremental":
            if i == 0:
                return fed[0] if len(init) else np.zeros(strain.shape[1])
            w.strain[0, -1] = strain[i] - strain[i - 1]
            prev = fed[i - 1]
            return prev + model.predict(w)[0]
        return model.predict(w)[0]

    if model.form == "incremental" and len(init) == 0:
        init = np.zeros((1, strain.shape[1]))  # start from the unloaded state
    return _rollout(len(strain), s, init, step)


def teacher_forced_stress(model: TcrnnModel, path: MaterialPath) -> np.ndarray:
    """Predictions with true history stress; step 0 uses a fully padded window."""
    ws = make_windows([path], model.rnn_steps)
    first = _window_at(0, model.rnn_steps, path.strain, path.stress, path.temperature)
    return np.concatenate([predict_stress(model, first), predict_stress(model, ws.window)])


@dataclass
class PathReport:
    name: str
    role: str
    relative_error: float
    teacher_forced_error: float
    stress: np.ndarray
    rollout: Rollout
    spearman: Optional[list[float]] = None


@dataclass
class EvalReport:
    paths: list[PathReport] = field(default_factory=list)
    wall_s: float = 0.0

    def mean_error(self, role: Optional[str] = None) -> float:
        errs = [p.relative_error for p in self.paths if role is None or p.role == role]
        return float(np.mean(errs)) if errs else float("nan")


def evaluate_paths(model: TcrnnModel, paths: Sequence[MaterialPath], roles: Sequence[str],
                   traces: bool = True, zero_history: bool = False) -> EvalReport:
    t0 = time.perf_counter()
    report = EvalReport()
    s = model.rnn_steps
    inits = [np.zeros_like(p.stress[:s - 1]) if zero_history else p.stress[:s - 1]
             for p in paths]
    temps = None
    if paths and paths[0].temperature is not None:
        temps = [p.temperature for p in paths]
    rolls = rollout_paths(model, [p.strain for p in paths], inits, [p.time for p in paths],
                          temps, traces)
    for path, role, ro in zip(paths, roles, rolls):
        rho = None
        if traces and path.reference_isv is not None:
            rho = []
            for k in range(model.isv_dim):
                try:
                    rho.append(spearman(ro.isv[:, k], path.reference_isv[:, 0]))
                except ValueError:
                    rho.append(float("nan"))
        report.paths.append(PathReport(
            path.name, role, relative_error(path.stress, ro.stress),
            relative_error(path.stress, teacher_forced_stress(model, path)),
            ro.stress, ro, rho))
    report.wall_s = time.perf_counter() - t0
    return report


# Sweeps -----------------------------------------------------------------------

@dataclass
class SweepSpec:
    axis: str
    values: list
    repetitions: int = 1
    base_model: dict = field(default_factory=dict)
    config: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        if self.axis not in AXES:
            raise ValueError(f"unknown sweep axis {self.axis!r}")
        if not self.values:
            raise ValueError("sweep needs at least one value")
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")


def cell_seed(base_seed: int, axis: str, value, repetition: int) -> int:
    tag = zlib.crc32(f"{axis}={value!r}".encode())
    seq = np.random.SeedSequence([base_seed, tag, repetition])
    return int(seq.generate_state(1)[0])


def run_sweep(spec: SweepSpec, dataset: Sequence[MaterialPath], train_ids: Sequence[int],
              test_ids: Sequence[int], skip: Callable[[object, int], bool] = lambda v, s: False,
              on_rows: Optional[Callable[[list[dict]], None]] = None) -> list[dict]:
    """Train one model per (value, repetition) and report open-loop errors.

    For the ``strain_increment`` axis the value selects the training path by
    its ``meta["strain_increment"]``; every other path is a test path.
    """
    rows = []
    for value in spec.values:
        for rep in range(spec.repetitions):
            seed = cell_seed(spec.config.seed, spec.axis, value, rep)
            if skip(value, seed):
                continue
            t0 = time.perf_counter()
            hp = dict(spec.base_model)
            tr, te = list(train_ids), list(test_ids)
            if spec.axis == "strain_increment":
                tr = [i for i, p in enumerate(dataset)
                      if np.isclose(p.meta.get("strain_increment", np.nan), value)]
                if not tr:
                    raise ValueError(f"no path with strain increment {value}")
                te = [i for i in range(len(dataset)) if i not in tr]
            else:
                hp[spec.axis] = value
            model = TcrnnModel(**hp)
            cfg = replace(spec.config, seed=seed)
            model, _ = train(model, [dataset[i] for i in tr], cfg)
            paths = [dataset[i] for i in tr + te]
            roles = ["train"] * len(tr) + ["test"] * len(te)
            report = evaluate_paths(model, paths, roles, traces=False)
            wall = time.perf_counter() - t0
            cell_rows = [dict(axis=spec.axis, value=value, seed=seed, path_id=p.name,
                              role=p.role, relative_error=p.relative_error, wall_s=wall)
                         for p in report.paths]
            rows.extend(cell_rows)
            if on_rows is not None:
                on_rows(cell_rows)
    return rows
