"""Training pipeline: statistics, teacher-forced windows, losses, Adam, checkpoints."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Mapping, Optional, Sequence

import numpy as np

from .autodiff import Graph, Node, NonFiniteError
from .datagen import MaterialPath, augment_time_consistency, perturb_stress
from .nets import GruCell, SequenceWindow, VanillaRnnCell, constitutive_graph, lift_params
from .standardize import ConstantColumnError, StandardizationStats
from .thermo import ThermoGraph, TcrnnModel, build_graph

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
LOSS_VARIANTS = ("full", "d_constraint", "unsupervised", "hybrid")


class TrainingDivergence(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


# Standardization --------------------------------------------------------------

def _stack(dataset, attr):
    cols = [getattr(p, attr) for p in dataset]
    if any(c is None for c in cols):
        return None
    return np.concatenate(cols, axis=0)


def fit_stats(dataset: Sequence[MaterialPath], energy_from_data: bool = True,
              isv: bool = False) -> StandardizationStats:
    """Population mean/std over every step of every path.

    Groups absent from any path are skipped. Without energy data (or with
    ``energy_from_data=False``) the energy scale is ``std_stress * std_strain``
    with zero mean, so ``F >= 0`` and ``Fbar >= 0`` coincide.
    """
    if not dataset:
        raise ValueError("cannot fit statistics on an empty dataset")
    stats = StandardizationStats()
    stats.fit_group("strain", _stack(dataset, "strain"))
    stats.fit_group("stress", _stack(dataset, "stress"))
    for group in ("temperature", "dissipation", "entropy"):
        col = _stack(dataset, group)
        if col is not None:
            stats.fit_group(group, col)
    energy = _stack(dataset, "free_energy")
    if energy_from_data and energy is not None:
        stats.fit_group("free_energy", energy)
    else:
        scale = float(np.prod(stats.std["stress"]) ** (1 / stats.std["stress"].size)
                      * np.prod(stats.std["strain"]) ** (1 / stats.std["strain"].size))
        stats.set("free_energy", 0.0, scale)
    if isv:
        col = _stack(dataset, "reference_isv")
        if col is None:
            raise ValueError("hybrid training needs a known ISV column on every path")
        stats.fit_group("isv", col)
    return stats


# Windows ----------------------------------------------------------------------

def path_rates(values: np.ndarray, time: np.ndarray) -> np.ndarray:
    """Backward-difference rates; the first step is taken to start from rest."""
    out = np.zeros_like(values)
    dt = np.diff(time).reshape((-1,) + (1,) * (values.ndim - 1))
    out[1:] = np.diff(values, axis=0) / dt
    return out


@dataclass
class WindowSet:
    """Batched teacher-forced windows with their rates, time steps and targets."""

    window: SequenceWindow
    rates: SequenceWindow
    dt: np.ndarray
    targets: dict[str, np.ndarray]
    origin: np.ndarray  # (B, 2): path index, target step

    def __len__(self) -> int:
        return self.window.batch

    def __getitem__(self, i):
        sel = np.atleast_1d(np.arange(len(self))[i])
        return self.take(sel)

    def take(self, sel: np.ndarray) -> "WindowSet":
        def w(x: SequenceWindow):
            t = None if x.temperature is None else x.temperature[sel]
            return SequenceWindow(x.strain[sel], x.stress[sel], t)

        return WindowSet(w(self.window), w(self.rates), self.dt[sel],
                         {k: v[sel] for k, v in self.targets.items()}, self.origin[sel])


def window_indices(n: int, rnn_steps: int, pad: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Target steps and the ``(B, s)`` step indices of their windows."""
    first = 1 if pad else max(rnn_steps - 1, 1)
    targets = np.arange(first, n)
    idx = targets[:, None] - (rnn_steps - 1) + np.arange(rnn_steps)[None, :]
    return targets, np.maximum(idx, 0)


def make_windows(dataset: Sequence[MaterialPath], rnn_steps: int, noisy_stress: bool = False,
                 pad: bool = True, form: str = "total") -> WindowSet:
    """Sliding windows over every path.

    History stress comes from the perturbed column when ``noisy_stress`` is set;
    targets always come from clean columns. In ``form="incremental"`` the
    current strain entry is the strain increment and the stress target is the
    stress increment.
    """
    parts = []
    for pi, path in enumerate(dataset):
        n = len(path)
        if n < rnn_steps or (not pad and n < 2):
            raise ValueError(f"path {path.name!r} has {n} steps, shorter than {rnn_steps}")
        tgt, idx = window_indices(n, rnn_steps, pad)
        hist_sig = path.history_stress if noisy_stress else path.stress
        strain = path.strain[idx]
        eps_rate = path_rates(path.strain, path.time)[idx]
        sig_rate = path_rates(path.stress, path.time)[idx[:, :-1]]
        stress_target = path.stress[tgt]
        if form == "incremental":
            strain = strain.copy()
            strain[:, -1] = path.strain[tgt] - path.strain[tgt - 1]
            stress_target = path.stress[tgt] - path.stress[tgt - 1]
        elif form != "total":
            raise ValueError(f"unknown form {form!r}")
        temp = temp_rate = None
        if path.temperature is not None:
            temp = path.temperature[idx]
            temp_rate = path_rates(path.temperature, path.time)[idx]
        targets = {"stress": stress_target, "prev_stress": path.stress[tgt - 1]}
        for name in ("free_energy", "dissipation", "entropy"):
            col = getattr(path, name)
            if col is not None:
                targets[name] = col[tgt]
        if path.reference_isv is not None:
            targets["isv"] = path.reference_isv[tgt]
        parts.append(dict(
            strain=strain, stress=hist_sig[idx[:, :-1]], temp=temp,
            eps_rate=eps_rate, sig_rate=sig_rate, temp_rate=temp_rate,
            dt=path.time[tgt] - path.time[tgt - 1], targets=targets,
            origin=np.stack([np.full(len(tgt), pi), tgt], axis=1),
        ))

    def cat(key):
        vals = [q[key] for q in parts]
        return None if any(v is None for v in vals) else np.concatenate(vals, axis=0)

    keys = set.intersection(*(set(q["targets"]) for q in parts))
    targets = {k: np.concatenate([q["targets"][k] for q in parts]) for k in sorted(keys)}
    return WindowSet(
        window=SequenceWindow(cat("strain"), cat("stress"), cat("temp")),
        rates=SequenceWindow(cat("eps_rate"), cat("sig_rate"), cat("temp_rate")),
        dt=cat("dt"), targets=targets, origin=cat("origin"),
    )


# Losses -----------------------------------------------------------------------

@dataclass
class LossWeights:
    beta1: float = 1.0
    beta2: float = 1.0
    beta3: float = 0.0
    beta4: float = 1.0
    variant: str = "full"
    norm: str = "l1sq"

    def __post_init__(self):
        for b in (self.beta1, self.beta2, self.beta3, self.beta4):
            if not (math.isfinite(b) and b >= 0):
                raise ValueError("loss weights must be finite and non-negative")
        if self.variant not in LOSS_VARIANTS:
            raise ValueError(f"unknown loss variant {self.variant!r}")
        if self.norm not in ("l1sq", "mse"):
            raise ValueError(f"unknown loss norm {self.norm!r}")


def residual_norm(g: Graph, r: Node, norm: str = "l1sq") -> Node:
    """``sum_n (sum_i |r_ni|)^2`` for ``l1sq``; mean of squares for ``mse``."""
    if r.value.ndim == 1:
        r = g.reshape(r, (r.shape[0], 1))
    if norm == "mse":
        return g.scale(g.sum(g.mul(r, r)), 1.0 / r.value.size)
    per_step = g.sum(g.abs(r), axis=1)
    return g.sum(g.mul(per_step, per_step))


def _standardized_residual(g, pred: Node, target: np.ndarray, std) -> Node:
    return g.mul(g.sub(pred, g.constant(target)), g.constant(1.0 / np.asarray(std)))


def _need(targets, *names):
    for name in names:
        if name not in targets:
            raise ValueError(f"missing target column {name!r}")


def _stress_term(g, pred: ThermoGraph, targets, stats, norm):
    _need(targets, "stress")
    r = _standardized_residual(g, pred.stress, targets["stress"], stats.std["stress"])
    return residual_norm(g, r, norm)


def _penalty(g, x: Node, stats: StandardizationStats) -> Node:
    """``sum relu(-x) / std_F``: the sign constraint on a physical quantity.

    Dividing by the positive energy scale leaves the feasible set unchanged
    and keeps the penalty commensurate with the standardized stress term.
    """
    _, std_f = stats.scalar("free_energy")
    return g.scale(g.sum(g.relu(g.neg(x))), 1.0 / std_f)


def loss_full(g: Graph, pred: ThermoGraph, targets, w: LossWeights,
              stats: StandardizationStats) -> Node:
    _need(targets, "stress", "free_energy", "dissipation")
    mu_f, std_f = stats.scalar("free_energy")
    f_bar = (targets["free_energy"] - mu_f) / std_f
    loss = _stress_term(g, pred, targets, stats, w.norm)
    loss = g.add(loss, g.scale(residual_norm(g, g.sub(pred.energy_bar, g.constant(f_bar)),
                                             w.norm), w.beta1))
    if pred.dissipation is None:
        raise ValueError("prediction has no dissipation")
    r = _standardized_residual(g, pred.dissipation, targets["dissipation"],
                               stats.std["dissipation"])
    loss = g.add(loss, g.scale(residual_norm(g, r, w.norm), w.beta2))
    if w.beta3 > 0:
        _need(targets, "entropy")
        if pred.entropy is None:
            raise ValueError("entropy term needs a non-isothermal model")
        r = _standardized_residual(g, pred.entropy, targets["entropy"], stats.std["entropy"])
        loss = g.add(loss, g.scale(residual_norm(g, r, w.norm), w.beta3))
    return loss


def loss_d_constraint(g: Graph, pred: ThermoGraph, targets, w: LossWeights,
                      stats: StandardizationStats) -> Node:
    _need(targets, "stress", "free_energy")
    mu_f, std_f = stats.scalar("free_energy")
    f_bar = (targets["free_energy"] - mu_f) / std_f
    loss = _stress_term(g, pred, targets, stats, w.norm)
    loss = g.add(loss, g.scale(residual_norm(g, g.sub(pred.energy_bar, g.constant(f_bar)),
                                             w.norm), w.beta1))
    return g.add(loss, g.scale(_penalty(g, pred.dissipation, stats), w.beta2))


def loss_unsupervised(g: Graph, pred: ThermoGraph, targets, w: LossWeights,
                      stats: StandardizationStats) -> Node:
    loss = _stress_term(g, pred, targets, stats, w.norm)
    loss = g.add(loss, g.scale(_penalty(g, pred.free_energy, stats), w.beta1))
    return g.add(loss, g.scale(_penalty(g, pred.dissipation, stats), w.beta2))


def loss_hybrid(g: Graph, pred: ThermoGraph, targets, w: LossWeights,
                stats: StandardizationStats) -> Node:
    _need(targets, "isv")
    known = targets["isv"].reshape(len(targets["isv"]), -1)
    n_known = known.shape[1]
    if pred.isv.shape[1] <= n_known:
        raise ValueError(f"ISV dimension {pred.isv.shape[1]} must exceed the "
                         f"{n_known} known ISVs")
    loss = loss_unsupervised(g, pred, targets, w, stats)
    z_known = g.slice(pred.isv, (slice(None), slice(0, n_known)))
    r = g.sub(z_known, g.constant(stats.standardize("isv", known)))
    return g.add(loss, g.scale(residual_norm(g, r, w.norm), w.beta4))


LOSSES = {"full": loss_full, "d_constraint": loss_d_constraint,
          "unsupervised": loss_unsupervised, "hybrid": loss_hybrid}


# Adam -------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: Mapping[str, np.ndarray], grads: Mapping[str, np.ndarray],
              state: AdamState, lr: float = 1e-3):
    """Bias-corrected Adam; returns new ``(params, state)`` without mutating inputs."""
    t = state.t + 1
    new_params, m_new, v_new = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {k}")
        m = state.beta1 * state.m.get(k, np.zeros_like(p)) + (1 - state.beta1) * g
        v = state.beta2 * state.v.get(k, np.zeros_like(p)) + (1 - state.beta2) * g * g
        m_hat = m / (1 - state.beta1 ** t)
        v_hat = v / (1 - state.beta2 ** t)
        new_params[k] = p - lr * m_hat / (np.sqrt(v_hat) + state.eps)
        m_new[k], v_new[k] = m, v
    return new_params, replace(state, m=m_new, v=v_new, t=t)


# Training ---------------------------------------------------------------------

@dataclass
class TrainConfig:
    epochs: int = 2000
    batch_size: int = 0  # 0: full batch
    learning_rate: float = 1e-3
    noise_ratio: float = 0.0
    resample_noise: bool = True
    time_consistency_stride: int = 0
    seed: int = 0
    pad: bool = True
    weights: LossWeights = field(default_factory=LossWeights)

    def __post_init__(self):
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning rate must be positive")
        if self.noise_ratio < 0:
            raise ValueError("noise ratio must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


def noise_seed(seed: int, epoch: int, path_index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([seed, epoch, path_index, 0x5EED])


def noisy_dataset(dataset, config: TrainConfig, epoch: int) -> list[MaterialPath]:
    if config.noise_ratio == 0:
        return [replace(p, input_stress=None) for p in dataset]
    e = epoch if config.resample_noise else 0
    return [perturb_stress(p, config.noise_ratio, noise_seed(config.seed, e, i))
            for i, p in enumerate(dataset)]


def prepare(model: TcrnnModel, dataset: Sequence[MaterialPath], config: TrainConfig):
    """Fit statistics and initialise parameters if needed; returns the training paths."""
    dataset = list(dataset)
    if config.time_consistency_stride:
        dataset = augment_time_consistency(dataset, config.time_consistency_stride)
    uses_energy = config.weights.variant in ("full", "d_constraint")
    model.stats = fit_stats(dataset, energy_from_data=uses_energy,
                            isv=config.weights.variant == "hybrid")
    if not model.params:
        model.init_params(config.seed)
    return dataset


def model_loss(model: TcrnnModel, g: Graph, p: Mapping[str, Node], batch: WindowSet,
               weights: LossWeights) -> tuple[Node, ThermoGraph]:
    tg = build_graph(model, g, p, batch.window, batch.rates, batch.dt)
    return LOSSES[weights.variant](g, tg, batch.targets, weights, model.stats), tg


def loss_and_grads(model: TcrnnModel, batch: WindowSet, weights: LossWeights):
    g = Graph()
    p = lift_params(g, model.params)
    loss, _ = model_loss(model, g, p, batch, weights)
    names = sorted(model.params)
    grads = g.backward(loss, [p[k] for k in names])
    return float(loss.value), {k: grads[p[k].index] for k in names}


def _batches(n: int, config: TrainConfig, epoch: int):
    if not config.batch_size or config.batch_size >= n:
        return [np.arange(n)]
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, epoch, 0xBA7C]))
    order = rng.permutation(n)
    return [order[i:i + config.batch_size] for i in range(0, n, config.batch_size)]


def train(model: TcrnnModel, dataset: Sequence[MaterialPath], config: TrainConfig,
          callback=None) -> tuple[TcrnnModel, list[float]]:
    """Adam training on teacher-forced windows; returns the model and per-epoch losses.

    The recorded loss of an epoch is the sum of its mini-batch losses,
    evaluated before each parameter update.
    """
    paths = prepare(model, dataset, config)
    state = AdamState()
    history = []
    windows = None
    for epoch in range(config.epochs):
        if windows is None or (config.noise_ratio > 0 and config.resample_noise):
            windows = make_windows(noisy_dataset(paths, config, epoch), model.rnn_steps,
                                   noisy_stress=config.noise_ratio > 0, pad=config.pad)
        total = 0.0
        for sel in _batches(len(windows), config, epoch):
            try:
                loss, grads = loss_and_grads(model, windows.take(sel), config.weights)
            except NonFiniteError as exc:
                raise TrainingDivergence(f"non-finite value at epoch {epoch}: {exc}") from exc
            if not math.isfinite(loss):
                raise TrainingDivergence(f"non-finite loss at epoch {epoch}")
            total += loss
            model.params, state = adam_step(model.params, grads, state, config.learning_rate)
        history.append(total)
        if callback is not None:
            callback(epoch, total, model)
    return model, history


# Checkpoints ------------------------------------------------------------------

def model_to_dict(model: TcrnnModel, config: Optional[TrainConfig] = None,
                  final_loss: Optional[float] = None) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "kind": "tcrnn",
        "model": model.hyperparameters(),
        "stats": None if model.stats is None else model.stats.to_dict(),
        "params": {k: {"shape": list(v.shape), "data": v.reshape(-1).tolist()}
                   for k, v in sorted(model.params.items())},
        "config_echo": None if config is None else config.to_dict(),
        "final_loss": final_loss,
    }


def model_from_dict(data: dict) -> TcrnnModel:
    try:
        version = data["format_version"]
    except (KeyError, TypeError) as exc:
        raise CheckpointError("checkpoint has no format_version") from exc
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"unsupported checkpoint format_version {version!r}")
    try:
        model = TcrnnModel(**data["model"])
        if data.get("stats") is not None:
            model.stats = StandardizationStats.from_dict(data["stats"])
        model.params = {k: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"])
                        for k, v in data["params"].items()}
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from exc
    missing = set(model.param_names()) - set(model.params)
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters {sorted(missing)}")
    return model


def save_checkpoint(model: TcrnnModel, path, config: Optional[TrainConfig] = None,
                    final_loss: Optional[float] = None) -> None:
    # json writes floats with repr, which round-trips binary64 exactly
    Path(path).write_text(json.dumps(model_to_dict(model, config, final_loss), indent=1))


def load_checkpoint(path) -> TcrnnModel:
    return model_from_dict(read_checkpoint(path))


def read_checkpoint(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"cannot parse checkpoint {path}: {exc}") from exc


# Constitutive RNN baselines ----------------------------------------------------

@dataclass
class BaselineModel:
    """Plain many-to-one RNN constitutive model in total or incremental form."""

    form: str = "total"
    strain_dim: int = 1
    hidden_dim: int = 30
    rnn_steps: int = 5
    cell_kind: str = "gru"
    activation: str = "tanh"
    params: dict[str, np.ndarray] = field(default_factory=dict)
    stats: Optional[StandardizationStats] = None

    def __post_init__(self):
        if self.form not in ("total", "incremental"):
            raise ValueError(f"unknown form {self.form!r}")

    @property
    def cell(self):
        n_in = 2 * self.strain_dim
        if self.cell_kind == "gru":
            return GruCell(n_in, self.hidden_dim, self.strain_dim, prefix="rnn")
        return VanillaRnnCell(n_in, self.hidden_dim, self.strain_dim, self.activation,
                              prefix="rnn")

    def _groups(self):
        if self.form == "total":
            return "strain", "stress"
        return "strain_increment", "stress_increment"

    def standardize(self, window: SequenceWindow) -> SequenceWindow:
        cur, _ = self._groups()
        strain = self.stats.standardize("strain", window.strain)
        strain[:, -1] = self.stats.standardize(cur, window.strain[:, -1])
        return SequenceWindow(strain, self.stats.standardize("stress", window.stress))

    def output_graph(self, g: Graph, p, window: SequenceWindow) -> Node:
        """Standardized output: total stress or stress increment."""
        return constitutive_graph(self.cell, g, p, self.standardize(window))

    def predict(self, window: SequenceWindow) -> np.ndarray:
        """Physical output for a window batch."""
        g = Graph()
        y = self.output_graph(g, lift_params(g, self.params, False), window).value
        return self.stats.destandardize(self._groups()[1], y)


def train_baseline(model: BaselineModel, dataset: Sequence[MaterialPath],
                   config: TrainConfig) -> tuple[BaselineModel, list[float]]:
    """Teacher-forced training of a baseline on standardized stress (or increment) error."""
    dataset = list(dataset)
    stats = fit_stats(dataset, energy_from_data=False)
    inc = [np.diff(p.strain, axis=0) for p in dataset]
    stats.fit_group("strain_increment", np.concatenate(inc))
    stats.fit_group("stress_increment", np.concatenate([np.diff(p.stress, axis=0)
                                                        for p in dataset]))
    model.stats = stats
    if not model.params:
        model.params = model.cell.init(np.random.default_rng(config.seed))
    out_group = model._groups()[1]
    state = AdamState()
    history = []
    windows = None
    for epoch in range(config.epochs):
        if windows is None or (config.noise_ratio > 0 and config.resample_noise):
            windows = make_windows(noisy_dataset(dataset, config, epoch), model.rnn_steps,
                                   noisy_stress=config.noise_ratio > 0, pad=config.pad,
                                   form=model.form)
        total = 0.0
        for sel in _batches(len(windows), config, epoch):
            batch = windows.take(sel)
            g = Graph()
            p = lift_params(g, model.params)
            y = model.output_graph(g, p, batch.window)
            target = stats.standardize(out_group, batch.targets["stress"])
            loss = residual_norm(g, g.sub(y, g.constant(target)), config.weights.norm)
            names = sorted(model.params)
            grads = g.backward(loss, [p[k] for k in names])
            if not math.isfinite(float(loss.value)):
                raise TrainingDivergence(f"non-finite loss at epoch {epoch}")
            total += float(loss.value)
            model.params, state = adam_step(
                model.params, {k: grads[p[k].index] for k in names}, state,
                config.learning_rate)
        history.append(total)
    return model, history


__all__ = [
    "AdamState", "BaselineModel", "CheckpointError", "CheckpointVersionError",
    "ConstantColumnError", "LossWeights", "StandardizationStats", "TrainConfig",
    "TrainingDivergence", "WindowSet", "adam_step", "fit_stats", "load_checkpoint",
    "loss_d_constraint", "loss_full", "loss_hybrid", "loss_unsupervised", "make_windows",
    "save_checkpoint", "train", "train_baseline",
]
