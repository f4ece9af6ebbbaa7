"""Thermodynamically consistent recurrent constitutive model.

A recurrent cell reads a standardized stress-strain window and a linear head
turns its last hidden state into internal state variables ``z``. A SiLU energy
network maps ``(strain, [temperature], z)`` to a standardized free energy.
Stress, entropy and dissipation are derivatives of that energy:

    stress      = std_F / std_eps * dFbar/depsbar
    entropy     = -std_F / std_T * dFbar/dTbar
    dissipation = -std_F * dFbar/dz . zdot

``zdot`` is either the exact chain rule through the recurrent cell
(``variant="rate"``) or ``(z_n - z_{n-1}) / dt`` read from the last two
hidden states (``variant="increment"``). All partials of the energy treat
``z`` as an independent input of the energy network.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Mapping, Optional

import numpy as np

from .autodiff import Graph, Node
from .nets import DenseStack, GruCell, SequenceWindow, VanillaRnnCell, lift_params, linear, rollout
from .standardize import StandardizationStats

VARIANTS = ("rate", "increment")
CELLS = ("gru", "vanilla")


@dataclass
class TcrnnModel:
    strain_dim: int = 1
    isv_dim: int = 1
    hidden_dim: int = 30
    rnn_steps: int = 5
    cell_kind: str = "gru"
    variant: str = "rate"
    thermal: bool = False
    activation: str = "silu"
    energy_hidden: list[int] = field(default_factory=lambda: [30])
    params: dict[str, np.ndarray] = field(default_factory=dict)
    stats: Optional[StandardizationStats] = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.cell_kind not in CELLS:
            raise ValueError(f"unknown cell kind {self.cell_kind!r}")
        if min(self.strain_dim, self.isv_dim, self.hidden_dim, self.rnn_steps) < 1:
            raise ValueError("dimensions and rnn_steps must be positive")
        if self.variant == "increment" and self.rnn_steps < 2:
            raise ValueError("the increment variant needs at least 2 RNN steps")

    @property
    def input_dim(self) -> int:
        return 2 * self.strain_dim + int(self.thermal)

    @property
    def cell(self):
        if self.cell_kind == "gru":
            return GruCell(self.input_dim, self.hidden_dim, prefix="isv")
        return VanillaRnnCell(self.input_dim, self.hidden_dim, activation=self.activation,
                              prefix="isv")

    @property
    def energy(self) -> DenseStack:
        n_in = self.strain_dim + int(self.thermal) + self.isv_dim
        return DenseStack([n_in, *self.energy_hidden, 1], "silu", prefix="energy")

    def param_names(self) -> list[str]:
        return self.cell.names() + ["isv.W_hz", "isv.b_z"] + self.energy.names()

    def init_params(self, seed: int) -> "TcrnnModel":
        rng = np.random.default_rng(seed)
        params = self.cell.init(rng)
        bound = 1.0 / np.sqrt(self.hidden_dim)
        params["isv.W_hz"] = rng.uniform(-bound, bound, (self.isv_dim, self.hidden_dim))
        params["isv.b_z"] = np.zeros(self.isv_dim)
        params.update(self.energy.init(rng))
        self.params = params
        return self

    def with_params(self, params: Mapping[str, np.ndarray]) -> "TcrnnModel":
        return replace(self, params={k: np.array(v, dtype=np.float64) for k, v in params.items()})

    def param_count(self) -> int:
        return sum(v.size for v in self.params.values())

    def hyperparameters(self) -> dict:
        return {
            "strain_dim": self.strain_dim, "isv_dim": self.isv_dim,
            "hidden_dim": self.hidden_dim, "rnn_steps": self.rnn_steps,
            "cell_kind": self.cell_kind, "variant": self.variant, "thermal": self.thermal,
            "activation": self.activation, "energy_hidden": list(self.energy_hidden),
        }


@dataclass
class ThermoOutputs:
    stress: np.ndarray
    free_energy: np.ndarray
    dissipation: Optional[np.ndarray]
    isv: np.ndarray
    entropy: Optional[np.ndarray] = None
    isv_rate: Optional[np.ndarray] = None
    isv_increment: Optional[np.ndarray] = None


@dataclass
class ThermoGraph:
    """Nodes of one composite evaluation, shared so training can differentiate it."""

    inputs: list[Node]
    isv: Node
    isv_prev: Optional[Node]
    energy_input: Node
    energy_bar: Node
    energy_grad: Node
    stress: Node
    free_energy: Node
    entropy: Optional[Node] = None
    isv_rate: Optional[Node] = None
    dissipation: Optional[Node] = None


def _require_stats(model: TcrnnModel) -> StandardizationStats:
    if model.stats is None:
        raise ValueError("model has no standardization statistics")
    return model.stats


def standardize_window(model: TcrnnModel, window: SequenceWindow) -> SequenceWindow:
    stats = _require_stats(model)
    if window.steps != model.rnn_steps:
        raise ValueError(f"window has {window.steps} steps, model expects {model.rnn_steps}")
    if window.dim != model.strain_dim:
        raise ValueError(f"window strain dimension {window.dim} != {model.strain_dim}")
    if window.thermal != model.thermal:
        raise ValueError("window temperature presence does not match the thermal mode")
    temp = None
    if model.thermal:
        temp = stats.standardize("temperature", window.temperature[..., None])[..., 0]
    return SequenceWindow(stats.standardize("strain", window.strain),
                          stats.standardize("stress", window.stress), temp)


def scale_rates(model: TcrnnModel, rates: SequenceWindow) -> list[np.ndarray]:
    """Per-step input rates divided by the matching std (means do not enter rates)."""
    stats = _require_stats(model)
    temp = None if rates.temperature is None else rates.temperature / stats.std["temperature"][0]
    scaled = SequenceWindow(rates.strain / stats.std["strain"],
                            rates.stress / stats.std["stress"], temp)
    return scaled.step_inputs()


def isv_graph(model: TcrnnModel, g: Graph, p: Mapping[str, Node], window_bar: SequenceWindow):
    """Roll the cell over a standardized window; returns (inputs, z_n, z_{n-1})."""
    inputs = [g.lift(x) for x in window_bar.step_inputs()]
    hs = rollout(model.cell, g, p, inputs)
    W, b = p["isv.W_hz"], p["isv.b_z"]
    z = linear(g, hs[-1], W, b)
    z_prev = linear(g, hs[-2], W, b) if len(hs) >= 2 and model.variant == "increment" else None
    return inputs, z, z_prev


def build_graph(model: TcrnnModel, g: Graph, p: Mapping[str, Node], window: SequenceWindow,
                rates: Optional[SequenceWindow] = None, dt=None,
                dissipation: bool = True) -> ThermoGraph:
    """Record the full composite for a (physical-unit) window batch.

    ``rates`` feeds the exact ISV rate of the rate variant; ``dt`` (per window)
    feeds the increment variant. With ``dissipation=False`` neither is needed.
    """
    stats = _require_stats(model)
    d = model.strain_dim
    wbar = standardize_window(model, window)
    inputs, z, z_prev = isv_graph(model, g, p, wbar)
    parts = [g.constant(wbar.strain[:, -1])]
    if model.thermal:
        parts.append(g.constant(wbar.temperature[:, -1:]))
    parts.append(z)
    x = g.concat(parts, axis=1)
    f_bar = g.reshape(model.energy.forward(g, p, x), (window.batch,))
    grad = g.grad(g.sum(f_bar), x)
    mu_f, std_f = stats.scalar("free_energy")
    out = ThermoGraph(
        inputs=inputs, isv=z, isv_prev=z_prev, energy_input=x, energy_bar=f_bar,
        energy_grad=grad,
        stress=g.mul(g.slice(grad, (slice(None), slice(0, d))),
                     g.constant(std_f / stats.std["strain"])),
        free_energy=g.shift(g.scale(f_bar, std_f), mu_f),
    )
    if model.thermal:
        out.entropy = g.scale(g.slice(grad, (slice(None), d)),
                              -std_f / stats.std["temperature"][0])
    if not dissipation:
        return out
    if model.variant == "rate":
        if rates is None:
            raise ValueError("the rate variant needs input rates for every window step")
        out.isv_rate = isv_rate_graph(model, g, inputs, z, rates)
        zdot = out.isv_rate
    else:
        if dt is None:
            raise ValueError("the increment variant needs a time step")
        dt = np.broadcast_to(np.asarray(dt, dtype=np.float64), (window.batch,))
        if np.any(dt <= 0):
            raise ValueError("time step must be positive")
        zdot = g.mul(g.sub(z, z_prev), g.constant((1.0 / dt)[:, None]))
    dfdz = g.slice(grad, (slice(None), slice(x.shape[1] - model.isv_dim, None)))
    out.dissipation = g.scale(g.sum(g.mul(dfdz, zdot), axis=1), -std_f)
    return out


def isv_rate_graph(model: TcrnnModel, g: Graph, inputs: list[Node], z: Node,
                   rates: SequenceWindow) -> Node:
    """Exact ``dz/dt`` summed over every input of every window step."""
    if rates.steps != len(inputs):
        raise ValueError("rates must cover every window step")
    scaled = [g.constant(r) for r in scale_rates(model, rates)]
    cols = []
    for k in range(model.isv_dim):
        zk = g.sum(g.slice(z, (slice(None), k)))
        grads = g.backward_as_graph(zk, inputs)
        total = None
        for gj, rj in zip(grads, scaled):
            term = g.sum(g.mul(gj, rj), axis=1)
            total = term if total is None else g.add(total, term)
        cols.append(g.reshape(total, (z.shape[0], 1)))
    return g.concat(cols, axis=1)


# Numeric entry points ---------------------------------------------------------

def _evaluate(model, window, rates=None, dt=None, dissipation=True):
    g = Graph()
    p = lift_params(g, model.params, False)
    return build_graph(model, g, p, window, rates, dt, dissipation)


def forward_all(model: TcrnnModel, window: SequenceWindow, dt=1.0,
                rates: Optional[SequenceWindow] = None) -> ThermoOutputs:
    need = model.variant == "increment" or rates is not None
    tg = _evaluate(model, window, rates, dt, dissipation=need)
    return ThermoOutputs(
        stress=tg.stress.value,
        free_energy=tg.free_energy.value,
        dissipation=None if tg.dissipation is None else tg.dissipation.value,
        isv=tg.isv.value,
        entropy=None if tg.entropy is None else tg.entropy.value,
        isv_rate=None if tg.isv_rate is None else tg.isv_rate.value,
        isv_increment=None if tg.isv_prev is None else tg.isv.value - tg.isv_prev.value,
    )


def infer_isv(model: TcrnnModel, window_bar: SequenceWindow) -> np.ndarray:
    """ISV from an already standardized window."""
    if window_bar.steps != model.rnn_steps:
        raise ValueError(f"window has {window_bar.steps} steps, model expects {model.rnn_steps}")
    g = Graph()
    return isv_graph(model, g, lift_params(g, model.params, False), window_bar)[1].value


def free_energy(model: TcrnnModel, strain_bar, isv, temperature_bar=None) -> np.ndarray:
    """Standardized energy for standardized strain/temperature and ISV rows."""
    parts = [np.atleast_2d(strain_bar)]
    if model.thermal:
        if temperature_bar is None:
            raise ValueError("non-isothermal model needs a temperature")
        parts.append(np.reshape(temperature_bar, (-1, 1)))
    parts.append(np.atleast_2d(isv))
    x = np.concatenate(parts, axis=1)
    if x.shape[1] != model.energy.input_dim:
        raise ValueError(f"energy input width {x.shape[1]} != {model.energy.input_dim}")
    g = Graph()
    out = model.energy.forward(g, lift_params(g, model.params, False), g.constant(x))
    return out.value[:, 0]


def predict_stress(model: TcrnnModel, window: SequenceWindow) -> np.ndarray:
    return _evaluate(model, window, dissipation=False).stress.value


def predict_entropy(model: TcrnnModel, window: SequenceWindow) -> np.ndarray:
    if not model.thermal:
        raise ValueError("entropy is only defined for non-isothermal models")
    return _evaluate(model, window, dissipation=False).entropy.value


def isv_rate_exact(model: TcrnnModel, window: SequenceWindow,
                   rates: SequenceWindow) -> np.ndarray:
    if model.variant != "rate":
        raise ValueError("exact ISV rates belong to the rate variant")
    if rates is None:
        raise ValueError("missing input rates")
    g = Graph()
    p = lift_params(g, model.params, False)
    inputs, z, _ = isv_graph(model, g, p, standardize_window(model, window))
    return isv_rate_graph(model, g, inputs, z, rates).value


def isv_increment(model: TcrnnModel, window: SequenceWindow):
    """Returns ``(z_{n-1}, z_n, dz_n)`` for the increment variant."""
    if model.variant != "increment":
        raise ValueError("ISV increments belong to the increment variant")
    g = Graph()
    p = lift_params(g, model.params, False)
    _, z, z_prev = isv_graph(model, g, p, standardize_window(model, window))
    return z_prev.value, z.value, z.value - z_prev.value


def predict_dissipation(model: TcrnnModel, window: SequenceWindow, rate_source: str,
                        dt=1.0, rates: Optional[SequenceWindow] = None) -> np.ndarray:
    expected = {"exact": "rate", "increment": "increment"}.get(rate_source)
    if expected is None:
        raise ValueError(f"unknown rate source {rate_source!r}")
    if expected != model.variant:
        raise ValueError(f"rate source {rate_source!r} does not match the {model.variant} variant")
    return _evaluate(model, window, rates, dt).dissipation.value
