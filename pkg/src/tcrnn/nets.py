"""Network building blocks expressed over :class:`~tcrnn.autodiff.Graph`.

Layers and cells are stateless architecture descriptors: the trainable arrays
live in a flat ``{name: ndarray}`` dict, and forward functions take a mapping
from those names to graph nodes. Batched inputs are row matrices ``(B, n)``
and weights are stored ``(n_out, n_in)``, so a layer computes ``x @ W.T + b``.

A window's input at every step is ``[strain, stress, temperature]``; the
current step has no stress, which is realised by a zero stress slot, i.e. the
``W_sigma`` columns are simply not exercised on that step.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .autodiff import Graph, Node

ACTIVATIONS = ("linear", "tanh", "sigmoid", "relu", "silu")


def activate(g: Graph, x: Node, kind: str) -> Node:
    if kind == "linear":
        return x
    if kind not in ACTIVATIONS:
        raise ValueError(f"unknown activation {kind!r}")
    return g.elementary(kind, x)


def uniform_init(rng: np.random.Generator, n_out: int, n_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(max(n_in, 1))
    return rng.uniform(-bound, bound, size=(n_out, n_in))


def lift_params(g: Graph, params: Mapping[str, np.ndarray],
                differentiable: bool = True) -> dict[str, Node]:
    """Lift parameters in sorted-name order so node layout is deterministic."""
    return {k: g.lift(params[k], differentiable) for k in sorted(params)}


def linear(g: Graph, x: Node, W: Node, b: Optional[Node] = None) -> Node:
    y = g.matmul_t(x, W)
    return y if b is None else g.add(y, b)


def as_batch(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x[None, :] if x.ndim == 1 else x


@dataclass
class DenseStack:
    """Fully connected layers; the final layer is always linear.

    ``widths`` lists every layer width from input to output, so
    ``DenseStack([3, 2, 2])`` is one hidden layer of 2 plus a 2-wide output.
    """

    widths: list[int]
    activation: str = "silu"
    prefix: str = "dense"

    def __post_init__(self):
        if self.widths and len(self.widths) < 2:
            raise ValueError("a stack needs an input and an output width")
        if any(w < 1 for w in self.widths):
            raise ValueError("layer widths must be positive")

    @property
    def n_layers(self) -> int:
        return max(len(self.widths) - 1, 0)

    @property
    def input_dim(self) -> int:
        return self.widths[0]

    @property
    def output_dim(self) -> int:
        return self.widths[-1]

    def names(self) -> list[str]:
        return [f"{self.prefix}.layer{i}.{t}" for i in range(self.n_layers) for t in "Wb"]

    def init(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        params = {}
        for i in range(self.n_layers):
            n_in, n_out = self.widths[i], self.widths[i + 1]
            params[f"{self.prefix}.layer{i}.W"] = uniform_init(rng, n_out, n_in)
            params[f"{self.prefix}.layer{i}.b"] = np.zeros(n_out)
        return params

    def param_count(self) -> int:
        return sum((self.widths[i] + 1) * self.widths[i + 1] for i in range(self.n_layers))

    def forward(self, g: Graph, p: Mapping[str, Node], x: Node) -> Node:
        if x.shape[-1] != self.input_dim:
            raise ValueError(f"expected input width {self.input_dim}, got {x.shape[-1]}")
        for i in range(self.n_layers):
            x = linear(g, x, p[f"{self.prefix}.layer{i}.W"], p[f"{self.prefix}.layer{i}.b"])
            if i < self.n_layers - 1:
                x = activate(g, x, self.activation)
        return x


def dnn_forward(stack: DenseStack, params: Mapping[str, np.ndarray], x) -> np.ndarray:
    """Numeric forward pass for one vector or a batch of row vectors."""
    x = np.asarray(x, dtype=np.float64)
    g = Graph()
    out = stack.forward(g, lift_params(g, params, False), g.constant(as_batch(x))).value
    return out[0] if x.ndim == 1 else out


@dataclass
class VanillaRnnCell:
    """``h = a(W_hh h + W_xh x + b_h)`` with optional linear head ``y = W_hy h + b_y``."""

    input_dim: int
    hidden_dim: int
    output_dim: Optional[int] = None
    activation: str = "tanh"
    prefix: str = "rnn"

    def names(self) -> list[str]:
        out = [f"{self.prefix}.{n}" for n in ("W_hh", "W_xh", "b_h")]
        if self.output_dim:
            out += [f"{self.prefix}.W_hy", f"{self.prefix}.b_y"]
        return out

    def init(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        h, x, q = self.hidden_dim, self.input_dim, self.prefix
        params = {
            f"{q}.W_hh": uniform_init(rng, h, h),
            f"{q}.W_xh": uniform_init(rng, h, x),
            f"{q}.b_h": np.zeros(h),
        }
        if self.output_dim:
            params[f"{q}.W_hy"] = uniform_init(rng, self.output_dim, h)
            params[f"{q}.b_y"] = np.zeros(self.output_dim)
        return params

    def param_count(self) -> int:
        h, x = self.hidden_dim, self.input_dim
        n = h * h + h * x + h
        if self.output_dim:
            n += self.output_dim * (h + 1)
        return n

    def step(self, g: Graph, p: Mapping[str, Node], h: Node, x: Node) -> Node:
        q = self.prefix
        pre = g.add(g.add(linear(g, h, p[f"{q}.W_hh"]), linear(g, x, p[f"{q}.W_xh"])),
                    p[f"{q}.b_h"])
        return activate(g, pre, self.activation)

    def head(self, g: Graph, p: Mapping[str, Node], h: Node) -> Node:
        return linear(g, h, p[f"{self.prefix}.W_hy"], p[f"{self.prefix}.b_y"])


@dataclass
class GruCell:
    """Gated recurrent unit with the extra interpolation bias ``b_h``.

    Gates use the logistic sigmoid and the candidate state uses tanh
    regardless of configuration.
    """

    input_dim: int
    hidden_dim: int
    output_dim: Optional[int] = None
    prefix: str = "gru"

    _GATES = ("r", "u", "ht")

    def names(self) -> list[str]:
        q = self.prefix
        out = [f"{q}.{w}" for gate in self._GATES for w in (f"W_h{gate}", f"W_x{gate}", f"b_{gate}")]
        out.append(f"{q}.b_h")
        if self.output_dim:
            out += [f"{q}.W_hy", f"{q}.b_y"]
        return out

    def init(self, rng: np.random.Generator) -> dict[str, np.ndarray]:
        h, x, q = self.hidden_dim, self.input_dim, self.prefix
        params = {}
        for gate in self._GATES:
            params[f"{q}.W_h{gate}"] = uniform_init(rng, h, h)
            params[f"{q}.W_x{gate}"] = uniform_init(rng, h, x)
            params[f"{q}.b_{gate}"] = np.zeros(h)
        params[f"{q}.b_h"] = np.zeros(h)
        if self.output_dim:
            params[f"{q}.W_hy"] = uniform_init(rng, self.output_dim, h)
            params[f"{q}.b_y"] = np.zeros(self.output_dim)
        return params

    def param_count(self) -> int:
        h, x = self.hidden_dim, self.input_dim
        n = 3 * (h * h + h * x + h) + h
        if self.output_dim:
            n += self.output_dim * (h + 1)
        return n

    def gates(self, g: Graph, p: Mapping[str, Node], h: Node, x: Node):
        q = self.prefix

        def affine(gate):
            return g.add(g.add(linear(g, h, p[f"{q}.W_h{gate}"]),
                               linear(g, x, p[f"{q}.W_x{gate}"])), p[f"{q}.b_{gate}"])

        r = g.sigmoid(affine("r"))
        u = g.sigmoid(affine("u"))
        cand = g.tanh(g.add(g.add(g.mul(r, linear(g, h, p[f"{q}.W_hht"])),
                                  linear(g, x, p[f"{q}.W_xht"])), p[f"{q}.b_ht"]))
        return r, u, cand

    def step(self, g: Graph, p: Mapping[str, Node], h: Node, x: Node) -> Node:
        _, u, cand = self.gates(g, p, h, x)
        # h = u*h_prev + (1-u)*cand + b_h  ==  cand + u*(h_prev - cand) + b_h
        return g.add(g.add(cand, g.mul(u, g.sub(h, cand))), p[f"{self.prefix}.b_h"])

    def head(self, g: Graph, p: Mapping[str, Node], h: Node) -> Node:
        return linear(g, h, p[f"{self.prefix}.W_hy"], p[f"{self.prefix}.b_y"])


def rollout(cell, g: Graph, p: Mapping[str, Node], xs: Sequence[Node],
            h0: Optional[Node] = None) -> list[Node]:
    """Hidden states after each input; ``h0`` defaults to zeros."""
    if h0 is None:
        h0 = g.constant(np.zeros((xs[0].shape[0], cell.hidden_dim)))
    hs, h = [], h0
    for x in xs:
        if x.shape[-1] != cell.input_dim:
            raise ValueError(f"expected input width {cell.input_dim}, got {x.shape[-1]}")
        h = cell.step(g, p, h, x)
        hs.append(h)
    return hs


def vanilla_rnn_rollout(cell: VanillaRnnCell, params: Mapping[str, np.ndarray], xs,
                        h0=None) -> tuple[np.ndarray, np.ndarray]:
    """Numeric rollout of a single sequence; returns ``(ys, h_final)``."""
    g = Graph()
    p = lift_params(g, params, False)
    xs = [g.constant(as_batch(x)) for x in xs]
    h0 = None if h0 is None else g.constant(as_batch(h0))
    hs = rollout(cell, g, p, xs, h0)
    ys = np.stack([cell.head(g, p, h).value[0] for h in hs])
    return ys, hs[-1].value[0]


def gru_step(cell: GruCell, params: Mapping[str, np.ndarray], h_prev, x):
    """Numeric single GRU step; returns ``(h, y)`` with ``y`` None without a head."""
    g = Graph()
    p = lift_params(g, params, False)
    h = cell.step(g, p, g.constant(as_batch(h_prev)), g.constant(as_batch(x)))
    y = cell.head(g, p, h).value[0] if cell.output_dim else None
    return h.value[0], y


@dataclass
class SequenceWindow:
    """A batch of constitutive windows.

    ``strain`` is ``(B, s, d)`` for ``s`` RNN steps (history then current),
    ``stress`` is ``(B, s-1, d)`` for the history steps only and
    ``temperature`` is ``(B, s)`` or None. In incremental form the current
    strain entry holds the strain increment.
    """

    strain: np.ndarray
    stress: np.ndarray
    temperature: Optional[np.ndarray] = None

    def __post_init__(self):
        self.strain = np.asarray(self.strain, dtype=np.float64)
        self.stress = np.asarray(self.stress, dtype=np.float64)
        if self.strain.ndim == 2:  # single window
            self.strain = self.strain[None]
            self.stress = self.stress.reshape(1, -1, self.strain.shape[-1])
            if self.temperature is not None:
                self.temperature = np.asarray(self.temperature, dtype=np.float64)[None]
        if self.temperature is not None:
            self.temperature = np.asarray(self.temperature, dtype=np.float64)
        b, s, d = self.strain.shape
        if self.stress.shape != (b, s - 1, d):
            raise ValueError(f"history stress shape {self.stress.shape} does not match "
                             f"strain shape {self.strain.shape}")
        if self.temperature is not None and self.temperature.shape != (b, s):
            raise ValueError("temperature must have one entry per step")

    @property
    def batch(self) -> int:
        return self.strain.shape[0]

    @property
    def steps(self) -> int:
        return self.strain.shape[1]

    @property
    def dim(self) -> int:
        return self.strain.shape[2]

    @property
    def thermal(self) -> bool:
        return self.temperature is not None

    def step_inputs(self) -> list[np.ndarray]:
        """Per-step input rows ``[strain, stress, temperature]``; current stress is 0."""
        out = []
        for j in range(self.steps):
            sig = self.stress[:, j] if j < self.steps - 1 else np.zeros_like(self.strain[:, j])
            parts = [self.strain[:, j], sig]
            if self.temperature is not None:
                parts.append(self.temperature[:, j:j + 1])
            out.append(np.concatenate(parts, axis=1))
        return out

    def flat(self) -> np.ndarray:
        """History strain, history stress, [history T], current strain, [current T]."""
        parts = [self.strain[:, :-1].reshape(self.batch, -1),
                 self.stress.reshape(self.batch, -1)]
        if self.temperature is not None:
            parts.append(self.temperature[:, :-1])
        parts.append(self.strain[:, -1])
        if self.temperature is not None:
            parts.append(self.temperature[:, -1:])
        return np.concatenate(parts, axis=1)


def step_input_dim(dim: int, thermal: bool) -> int:
    return 2 * dim + int(thermal)


def constitutive_graph(cell, g: Graph, p: Mapping[str, Node], window: SequenceWindow) -> Node:
    """Many-to-one constitutive rollout; returns the output-head node ``(B, out)``."""
    xs = [g.constant(x) for x in window.step_inputs()]
    return cell.head(g, p, rollout(cell, g, p, xs)[-1])


def constitutive_forward(cell, params: Mapping[str, np.ndarray], window: SequenceWindow,
                         form: str = "total") -> np.ndarray:
    """Total form returns stress; incremental form returns a stress increment.

    The arithmetic is identical; ``form`` only documents how the current
    strain entry and the output are to be read.
    """
    if form not in ("total", "incremental"):
        raise ValueError(f"unknown form {form!r}")
    g = Graph()
    return constitutive_graph(cell, g, lift_params(g, params, False), window).value


@dataclass
class DnnConstitutive:
    """Fixed-history DNN baseline taking the flattened window as input."""

    history: int
    dim: int
    hidden: list[int] = field(default_factory=lambda: [20])
    thermal: bool = False
    activation: str = "tanh"
    prefix: str = "dnn"

    @property
    def stack(self) -> DenseStack:
        n_in = self.history * (2 * self.dim + int(self.thermal)) + self.dim + int(self.thermal)
        return DenseStack([n_in, *self.hidden, self.dim], self.activation, self.prefix)

    def forward_graph(self, g: Graph, p: Mapping[str, Node], window: SequenceWindow) -> Node:
        if window.steps - 1 != self.history:
            raise ValueError(f"model built for {self.history} history steps, "
                             f"window has {window.steps - 1}")
        return self.stack.forward(g, p, g.constant(window.flat()))


def dnn_constitutive_forward(model: DnnConstitutive, params: Mapping[str, np.ndarray],
                             window: SequenceWindow, form: str = "total") -> np.ndarray:
    if form not in ("total", "incremental"):
        raise ValueError(f"unknown form {form!r}")
    g = Graph()
    return model.forward_graph(g, lift_params(g, params, False), window).value
