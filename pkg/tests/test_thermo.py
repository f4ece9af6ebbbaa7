import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tcrnn.nets import SequenceWindow, dnn_forward
from tcrnn.thermo import (TcrnnModel, forward_all, free_energy, infer_isv, isv_increment,
                          isv_rate_exact, predict_dissipation, predict_entropy, predict_stress,
                          standardize_window)

from helpers import perturb_window, random_model, single, small_path, windows_for


def energy_at_fixed_isv(model, window, strain=None, temperature=None):
    """Destandardized energy with z frozen at its value for ``window``."""
    z = infer_isv(model, standardize_window(model, window))
    s = model.stats
    eps = window.strain[:, -1] if strain is None else strain
    eps_bar = s.standardize("strain", eps)
    t_bar = None
    if model.thermal:
        temp = window.temperature[:, -1] if temperature is None else temperature
        t_bar = s.standardize("temperature", temp[:, None])[:, 0]
    mu, std = s.scalar("free_energy")
    return mu + std * free_energy(model, eps_bar, z, t_bar)


def stress_fd_error(model, window):
    s = model.stats
    h = 1e-6 * s.std["strain"]
    eps = window.strain[:, -1]
    fd = np.zeros_like(eps)
    for i in range(eps.shape[1]):
        e = np.zeros_like(eps)
        e[:, i] = h[i]
        fd[:, i] = (energy_at_fixed_isv(model, window, eps + e)
                    - energy_at_fixed_isv(model, window, eps - e)) / (2 * h[i])
    sig = predict_stress(model, window)
    return float(np.max(np.abs(sig - fd) / np.maximum(np.abs(fd), 1e-8 * s.std["stress"])))


# model construction -----------------------------------------------------------

def test_model_validation():
    with pytest.raises(ValueError):
        TcrnnModel(variant="bogus")
    with pytest.raises(ValueError):
        TcrnnModel(variant="increment", rnn_steps=1)
    with pytest.raises(ValueError):
        TcrnnModel(isv_dim=0)


def test_energy_input_width():
    assert TcrnnModel(strain_dim=2, isv_dim=3).energy.input_dim == 5
    assert TcrnnModel(strain_dim=2, isv_dim=3, thermal=True).energy.input_dim == 6


def test_param_names_cover_init():
    m = TcrnnModel(hidden_dim=3, energy_hidden=[4]).init_params(0)
    assert sorted(m.param_names()) == sorted(m.params)
    assert "isv.W_hz" in m.params and "energy.layer0.W" in m.params


# infer_isv --------------------------------------------------------------------

def test_zero_cell_gives_isv_bias():
    m = random_model()
    m.params = {k: (np.zeros_like(v) if k.startswith("isv.") else v) for k, v in m.params.items()}
    m.params["isv.b_z"] = np.array([0.7])
    w, _, _ = single(windows_for(m), 5)
    assert infer_isv(m, standardize_window(m, w))[0, 0] == 0.7


def test_zero_isv_head_is_constant():
    m = random_model()
    m.params["isv.W_hz"] = np.zeros_like(m.params["isv.W_hz"])
    ws = windows_for(m)
    z = infer_isv(m, standardize_window(m, ws.window))
    assert np.all(z == z[0])


def test_history_stress_sensitivity():
    m = random_model(seed=3)
    w, _, _ = single(windows_for(m), 6)
    wbar = standardize_window(m, w)
    d = 1e-6
    e = np.zeros_like(wbar.stress)
    e[0, -1, 0] = d  # most recent history stress
    up = SequenceWindow(wbar.strain, wbar.stress + e)
    dn = SequenceWindow(wbar.strain, wbar.stress - e)
    slope = (infer_isv(m, up) - infer_isv(m, dn)) / (2 * d)
    assert abs(slope[0, 0]) > 1e-6


def test_wrong_window_length():
    m = random_model(rnn_steps=3)
    w = SequenceWindow(np.zeros((1, 2, 1)), np.zeros((1, 1, 1)))
    with pytest.raises(ValueError):
        infer_isv(m, w)
    with pytest.raises(ValueError):
        predict_stress(m, w)


# free energy and stress -------------------------------------------------------

def test_zero_head_energy_and_stress():
    m = random_model()
    m.params = {k: (np.zeros_like(v) if k.startswith("energy.") else v)
                for k, v in m.params.items()}
    ws = windows_for(m)
    assert np.all(free_energy(m, [[0.3]], [[0.1]]) == 0.0)
    assert np.all(predict_stress(m, ws.window) == 0.0)
    out = forward_all(m, ws.window, dt=ws.dt, rates=ws.rates)
    assert np.all(out.free_energy == m.stats.scalar("free_energy")[0])
    assert np.all(out.dissipation == 0.0)


def test_energy_independent_of_isv():
    m = random_model()
    m.params["energy.layer0.W"][:, 1:] = 0.0
    a = free_energy(m, [[0.3]], [[0.1]])
    b = free_energy(m, [[0.3]], [[-2.0]])
    assert a[0] == b[0]


def test_energy_matches_dnn_forward():
    m = random_model(seed=4)
    x = np.array([[0.3, -0.5]])
    ref = dnn_forward(m.energy, {k: v for k, v in m.params.items() if k.startswith("energy.")}, x)
    assert free_energy(m, x[:, :1], x[:, 1:])[0] == ref[0, 0]


def test_linear_head_stress():
    m = random_model()
    m.energy_hidden = []
    m.params = {k: v for k, v in m.params.items() if not k.startswith("energy.")}
    m.params["energy.layer0.W"] = np.array([[0.8, -0.3]])
    m.params["energy.layer0.b"] = np.zeros(1)
    ws = windows_for(m)
    std_f = m.stats.scalar("free_energy")[1]
    expected = std_f / m.stats.std["strain"][0] * 0.8
    np.testing.assert_allclose(predict_stress(m, ws.window)[:, 0], expected, rtol=1e-14)


def test_missing_stats():
    m = TcrnnModel(hidden_dim=2, rnn_steps=2).init_params(0)
    with pytest.raises(ValueError):
        predict_stress(m, SequenceWindow(np.zeros((1, 2, 1)), np.zeros((1, 1, 1))))


@pytest.mark.parametrize("seed", range(6))
def test_stress_energy_consistency(seed):
    m = random_model(seed=seed, scale=2.0)
    ws = windows_for(m)
    rng = np.random.default_rng(seed)
    for i in rng.choice(len(ws), 8, replace=False):
        w, _, _ = single(ws, i)
        assert stress_fd_error(m, w) < 1e-5


# entropy ----------------------------------------------------------------------

def test_entropy_only_for_thermal():
    m = random_model()
    with pytest.raises(ValueError):
        predict_entropy(m, windows_for(m).window)


def test_entropy_zero_when_head_ignores_temperature():
    m = random_model(thermal=True)
    m.params["energy.layer0.W"][:, 1] = 0.0
    assert np.all(predict_entropy(m, windows_for(m, thermal=True).window) == 0.0)


@pytest.mark.parametrize("seed", range(3))
def test_entropy_matches_fd(seed):
    m = random_model(seed=seed, thermal=True, scale=2.0)
    ws = windows_for(m, thermal=True)
    w, _, _ = single(ws, 7)
    T = w.temperature[:, -1]
    h = 1e-6 * m.stats.std["temperature"][0]
    fd = -(energy_at_fixed_isv(m, w, temperature=T + h)
           - energy_at_fixed_isv(m, w, temperature=T - h)) / (2 * h)
    S = predict_entropy(m, w)
    assert abs(S[0] - fd[0]) <= 1e-5 * max(abs(fd[0]), 1e-8)


# ISV rates --------------------------------------------------------------------

def test_zero_rates_zero_isv_rate():
    m = random_model()
    ws = windows_for(m)
    zero = SequenceWindow(np.zeros_like(ws.rates.strain), np.zeros_like(ws.rates.stress))
    assert np.all(isv_rate_exact(m, ws.window, zero) == 0.0)


def test_zero_isv_head_zero_rate():
    m = random_model()
    m.params["isv.W_hz"] = np.zeros_like(m.params["isv.W_hz"])
    ws = windows_for(m)
    assert np.all(isv_rate_exact(m, ws.window, ws.rates) == 0.0)


def test_rate_requires_rate_variant():
    m = random_model(variant="increment")
    ws = windows_for(m)
    with pytest.raises(ValueError):
        isv_rate_exact(m, ws.window, ws.rates)


@pytest.mark.parametrize("seed,thermal", [(0, False), (1, False), (2, True)])
def test_isv_rate_directional_fd(seed, thermal):
    m = random_model(seed=seed, thermal=thermal, isv_dim=2, scale=2.0)
    ws = windows_for(m, thermal=thermal)
    w, r, _ = single(ws, 9)
    d = 1e-6

    def z(sign):
        t = None if w.temperature is None else w.temperature + sign * d * r.temperature
        shifted = SequenceWindow(w.strain + sign * d * r.strain, w.stress + sign * d * r.stress, t)
        return infer_isv(m, standardize_window(m, shifted))

    fd = (z(1) - z(-1)) / (2 * d)
    exact = isv_rate_exact(m, w, r)
    np.testing.assert_allclose(exact, fd, rtol=1e-4, atol=1e-9)


def test_isv_increment_consistency():
    m = random_model(variant="increment", seed=5)
    ws = windows_for(m)
    zp, zn, dz = isv_increment(m, ws.window)
    assert zn.tobytes() == infer_isv(m, standardize_window(m, ws.window)).tobytes()
    np.testing.assert_array_equal(dz, zn - zp)


def test_isv_increment_zero_head():
    m = random_model(variant="increment")
    m.params["isv.W_hz"] = np.zeros_like(m.params["isv.W_hz"])
    assert np.all(isv_increment(m, windows_for(m).window)[2] == 0.0)


def test_isv_increment_constant_window_memoryless_cell():
    m = random_model(variant="increment", cell_kind="vanilla")
    m.params["isv.W_hh"] = np.zeros_like(m.params["isv.W_hh"])
    m.params["isv.W_xh"][:, 1] = 0.0  # no stress term
    w = SequenceWindow(np.full((1, 3, 1), 2e-3), np.full((1, 2, 1), 5e7))
    assert np.all(isv_increment(m, w)[2] == 0.0)


def test_increment_rate_converges_to_exact_for_memoryless_cell():
    # with no recurrence and no stress input, z_n depends on the current step only,
    # so the backward difference converges to the exact rate at first order
    m_inc = random_model(variant="increment", cell_kind="vanilla", seed=2, scale=2.0)
    m_inc.params["isv.W_hh"] = np.zeros_like(m_inc.params["isv.W_hh"])
    m_inc.params["isv.W_xh"][:, 1] = 0.0
    m_rate = TcrnnModel(**{**m_inc.hyperparameters(), "variant": "rate"})
    m_rate.params, m_rate.stats = m_inc.params, m_inc.stats
    st_ = m_inc.stats
    eps0, eps_rate = st_.mean["strain"][0], st_.std["strain"][0]
    sig0, sig_rate = st_.mean["stress"][0], st_.std["stress"][0]
    errors = []
    for dt in (1e-2, 5e-3, 2.5e-3):
        t = np.arange(3) * dt
        w = SequenceWindow((eps0 + eps_rate * t)[None, :, None],
                           (sig0 + sig_rate * t[:2])[None, :, None])
        rates = SequenceWindow(np.full((1, 3, 1), eps_rate), np.full((1, 2, 1), sig_rate))
        _, _, dz = isv_increment(m_inc, w)
        errors.append(abs(dz[0, 0] / dt - isv_rate_exact(m_rate, w, rates)[0, 0]))
    orders = np.log2(np.array(errors[:-1]) / np.array(errors[1:]))
    assert np.all(orders >= 0.9)


# dissipation ------------------------------------------------------------------

def test_dissipation_zero_when_energy_ignores_isv():
    for variant in ("rate", "increment"):
        m = random_model(variant=variant)
        m.params["energy.layer0.W"][:, 1:] = 0.0
        ws = windows_for(m)
        src = "exact" if variant == "rate" else "increment"
        assert np.all(predict_dissipation(m, ws.window, src, ws.dt, ws.rates) == 0.0)


def test_dissipation_rate_source_must_match():
    m = random_model()
    ws = windows_for(m)
    with pytest.raises(ValueError):
        predict_dissipation(m, ws.window, "increment", ws.dt)
    with pytest.raises(ValueError):
        predict_dissipation(m, ws.window, "nonsense", ws.dt)


def test_dissipation_rejects_nonpositive_dt():
    m = random_model(variant="increment")
    ws = windows_for(m)
    with pytest.raises(ValueError):
        predict_dissipation(m, ws.window, "increment", 0.0)


@pytest.mark.parametrize("seed", range(3))
def test_increment_dissipation_matches_fd(seed):
    m = random_model(variant="increment", seed=seed, isv_dim=2, scale=2.0)
    ws = windows_for(m)
    w, _, dt = single(ws, 8)
    zp, zn, dz = isv_increment(m, w)
    eps_bar = m.stats.standardize("strain", w.strain[:, -1])
    h = 1e-6
    grad = np.zeros(2)
    for k in range(2):
        e = np.zeros((1, 2))
        e[0, k] = h
        grad[k] = (free_energy(m, eps_bar, zn + e) - free_energy(m, eps_bar, zn - e))[0] / (2 * h)
    std_f = m.stats.scalar("free_energy")[1]
    expected = -std_f * grad @ (dz[0] / dt[0])
    D = predict_dissipation(m, w, "increment", dt)[0]
    assert abs(D - expected) <= 1e-5 * max(abs(expected), 1e-12)


# composite --------------------------------------------------------------------

def test_forward_all_agrees_with_components():
    for variant, src in (("rate", "exact"), ("increment", "increment")):
        m = random_model(variant=variant, seed=1)
        ws = windows_for(m)
        out = forward_all(m, ws.window, dt=ws.dt, rates=ws.rates)
        assert out.stress.tobytes() == predict_stress(m, ws.window).tobytes()
        D = predict_dissipation(m, ws.window, src, ws.dt, ws.rates)
        assert out.dissipation.tobytes() == D.tobytes()
        assert out.isv.tobytes() == infer_isv(m, standardize_window(m, ws.window)).tobytes()


def test_standardization_covariance():
    path = small_path()
    scaled = type(path)(**{**path.__dict__, "stress": path.stress * 8.0, "meta": {}})
    m1 = random_model(dataset=[path])
    m2 = random_model(dataset=[scaled])
    w1, w2 = windows_for(m1, [path]).window, windows_for(m2, [scaled]).window
    b1, b2 = standardize_window(m1, w1), standardize_window(m2, w2)
    assert b1.stress.tobytes() == b2.stress.tobytes()
    assert infer_isv(m1, b1).tobytes() == infer_isv(m2, b2).tobytes()


def test_thermal_with_zero_temperature_weights_reduces_to_isothermal():
    iso = random_model(seed=6)
    th = TcrnnModel(**{**iso.hyperparameters(), "thermal": True})
    th.params = dict(iso.params)
    for k, v in iso.params.items():
        if k.startswith("isv.W_x"):
            th.params[k] = np.concatenate([v, np.zeros((v.shape[0], 1))], axis=1)
    W = iso.params["energy.layer0.W"]
    th.params["energy.layer0.W"] = np.concatenate([W[:, :1], np.zeros((W.shape[0], 1)), W[:, 1:]], 1)
    th.stats = iso.stats.__class__.from_dict(iso.stats.to_dict())
    th.stats.set("temperature", 293.0, 10.0)
    ws = windows_for(iso)
    w = ws.window
    wt = SequenceWindow(w.strain, w.stress, np.full(w.strain.shape[:2], 293.0))
    rt = SequenceWindow(ws.rates.strain, ws.rates.stress, np.zeros(w.strain.shape[:2]))
    a = forward_all(iso, w, dt=ws.dt, rates=ws.rates)
    b = forward_all(th, wt, dt=ws.dt, rates=rt)
    assert a.stress.tobytes() == b.stress.tobytes()
    assert a.free_energy.tobytes() == b.free_energy.tobytes()
    assert a.dissipation.tobytes() == b.dissipation.tobytes()


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000), variant=st.sampled_from(["rate", "increment"]))
def test_stress_energy_consistency_property(seed, variant):
    m = random_model(seed=seed, variant=variant, scale=1.5)
    ws = windows_for(m)
    i = int(np.random.default_rng(seed).integers(len(ws)))
    assert stress_fd_error(m, single(ws, i)[0]) < 1e-4
