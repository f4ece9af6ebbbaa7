"""Small shared fixtures: tiny datasets and randomly parameterised models."""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from tcrnn.datagen import ElastoPlasticParams, LoadingProgram, generate_path
from tcrnn.nets import SequenceWindow
from tcrnn.pipeline import fit_stats, make_windows
from tcrnn.thermo import TcrnnModel


def small_path(inc=2.5e-4, thermal=False, name="p"):
    prog = LoadingProgram(((3e-3, inc), (1e-3, inc), (4e-3, inc)))
    path = generate_path(ElastoPlasticParams(), prog, name=name)
    if thermal:
        t = np.arange(len(path), dtype=float)
        path = replace(path, temperature=293.0 + 5.0 * np.sin(t / 3.0),
                       entropy=0.01 * np.cos(t / 4.0))
    return path


def random_model(seed=0, variant="rate", thermal=False, isv_dim=1, hidden_dim=4, rnn_steps=3,
                 cell_kind="gru", dataset=None, scale=1.0):
    model = TcrnnModel(isv_dim=isv_dim, hidden_dim=hidden_dim, rnn_steps=rnn_steps,
                       variant=variant, thermal=thermal, cell_kind=cell_kind,
                       energy_hidden=[5])
    model.init_params(seed)
    if scale != 1.0:
        model.params = {k: v * scale for k, v in model.params.items()}
    dataset = dataset or [small_path(thermal=thermal)]
    model.stats = fit_stats(dataset)
    return model


def windows_for(model, dataset=None, thermal=False):
    dataset = dataset or [small_path(thermal=thermal)]
    return make_windows(dataset, model.rnn_steps)


def single(ws, i):
    """One window (batch of one) from a window set, with its rates and dt."""
    sub = ws.take(np.array([i]))
    return sub.window, sub.rates, sub.dt


def perturb_window(w: SequenceWindow, d_strain=0.0, d_stress=0.0, d_temp=0.0):
    t = None if w.temperature is None else w.temperature + d_temp
    return SequenceWindow(w.strain + d_strain, w.stress + d_stress, t)
