import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from navformer import engine as E
from navformer.errors import InvalidConfig, ShapeMismatch
from navformer.features import TriadWindow
from navformer.linalg3 import random_rotations
from navformer.model import (
    NavFormer, embed_patches, film_condition, navformer_forward, num_patches, param_shapes,
    patch_indices, patchify, prepare_inputs, project_horizon,
)
from navformer.spd import EPSILON_FLOOR, gram_spectra

from oracles import (
    anisotropic_inputs, gradcheck_failures, model_gradcheck, rotate_inputs, toy_config, toy_model,
)


def test_patch_count_examples():
    assert num_patches(30, 8, 4) == 7
    assert num_patches(60, 16, 8) == 7
    P = patchify(np.arange(6.0)[:, None], 6, 6)
    assert P.shape == (1, 2, 6)
    np.testing.assert_array_equal(P[0, 1], 5.0)


def test_patch_indices_replication():
    idx = patch_indices(10, 4, 3)
    # starts 0, 3, 6, 9 -> last patch is 9, 9, 9, 9
    np.testing.assert_array_equal(idx[-1], [9, 9, 9, 9])
    np.testing.assert_array_equal(idx[1], [3, 4, 5, 6])
    with pytest.raises(InvalidConfig):
        patch_indices(10, 11, 1)
    with pytest.raises(InvalidConfig):
        patch_indices(10, 4, 5)


@settings(max_examples=200, deadline=None)
@given(st.data())
def test_patchify_matches_loop_oracle(data):
    L = data.draw(st.integers(1, 40))
    P = data.draw(st.integers(1, L))
    S = data.draw(st.integers(1, P))
    Z = np.random.default_rng(L * 1000 + P * 10 + S).normal(size=(L, 3))
    out = patchify(Z, P, S)
    Mp = (L - P) // S + 2
    assert out.shape == (3, Mp, P)
    for m in range(Mp):
        for j in range(P):
            np.testing.assert_array_equal(out[:, m, j], Z[min(m * S + j, L - 1)])


def test_config_validation():
    with pytest.raises(InvalidConfig):
        toy_config(pred_len=0)
    with pytest.raises(InvalidConfig):
        toy_config(d_model=10, n_heads=4)
    with pytest.raises(InvalidConfig):
        toy_config(patch_len=20)
    with pytest.raises(InvalidConfig):
        toy_config(stride=5)
    with pytest.raises(InvalidConfig):
        toy_config(target_channel=3)
    with pytest.raises(InvalidConfig):
        toy_config(frequencies=(0.1, -1.0))
    cfg = toy_config()
    assert cfg.d_aug == 12 + 9 + 4 and cfg.n_patches == 8
    assert toy_config(use_harmonics=False).d_aug == 21
    assert type(cfg).from_dict(cfg.to_dict()) == cfg


def test_param_count_and_groups():
    cfg = toy_config()
    shapes = param_shapes(cfg)
    assert sum(int(np.prod(s)) for s in shapes.values()) == 1495
    assert "film.W" not in param_shapes(toy_config(use_film=False))
    assert "scale.W1" not in param_shapes(toy_config(use_spd=False))


def test_init_statistics_and_sharing():
    cfg = toy_config(d_model=64, d_ff=128, seq_len=30, patch_len=8, stride=4)
    m = NavFormer(cfg)
    W = m.params["enc.0.ff.W1"].data
    assert abs(W.std() - 0.02) < 0.002 and np.all(m.params["enc.0.ff.b1"].data == 0)
    other = NavFormer(cfg.__class__(**{**cfg.to_dict(), "use_film": False}))
    assert np.array_equal(other.params["head.W"].data, m.params["head.W"].data)


def test_stage_examples():
    tok = embed_patches(E.Tensor([[5.0, 3.0]]), E.Tensor([[1.0, -1.0]]), E.Tensor([0.5]))
    assert tok.data[0, 0] == 2.5
    rng = np.random.default_rng(0)
    b = rng.normal(size=4)
    tok = embed_patches(E.Tensor(rng.normal(size=(2, 3, 5, 3))), E.Tensor(np.zeros((4, 3))), E.Tensor(b))
    np.testing.assert_array_equal(tok.data, np.broadcast_to(b, (2, 3, 5, 4)))
    H = E.Tensor([[[[1.0, 2.0]]]])
    assert project_horizon(H, E.Tensor([[3.0, 4.0]]), E.Tensor([0.0])).data[0, 0, 0] == 11.0
    H2 = E.Tensor(np.repeat(rng.normal(size=(1, 1, 3, 2)), 2, axis=1))
    out = project_horizon(H2, E.Tensor(rng.normal(size=(5, 6))), E.Tensor(np.zeros(5))).data
    assert np.array_equal(out[0, 0], out[0, 1])
    bh = rng.normal(size=5)
    out = project_horizon(E.Tensor(rng.normal(size=(1, 3, 3, 2))), E.Tensor(np.zeros((5, 6))), E.Tensor(bh))
    np.testing.assert_array_equal(out.data[0], np.broadcast_to(bh, (3, 5)))


def test_film_condition_examples():
    rng = np.random.default_rng(1)
    tokens = E.Tensor(rng.normal(size=(2, 12, 3, 4)))
    same = film_condition(tokens, E.Tensor(np.ones((2, 4))), E.Tensor(np.zeros((2, 4))))
    assert np.array_equal(same.data, tokens.data)
    beta = rng.normal(size=(2, 4))
    out = film_condition(tokens, E.Tensor(np.full((2, 4), 2.0)), E.Tensor(beta))
    np.testing.assert_array_equal(out.data[:, :9], 2 * tokens.data[:, :9] + beta[:, None, None])
    np.testing.assert_array_equal(out.data[:, 9:], tokens.data[:, 9:])
    with pytest.raises(ShapeMismatch):
        film_condition(tokens, E.Tensor(np.ones((2, 3))), E.Tensor(np.zeros((2, 3))))


def test_gamma_range():
    # weights kept moderate: once tanh rounds to +-1 in floating point gamma sits on a bound
    m = toy_model(std=0.3)
    trace = {}
    m.forward(anisotropic_inputs(8, 16, 12), trace)
    assert np.all((trace["gamma"] > 0) & (trace["gamma"] < 2))


def test_film_neutrality_bit_exact():
    m = toy_model(seed=1)
    m.params["film.W"].data[:] = 0.0
    m.params["film.b"].data[:] = 0.0
    x = anisotropic_inputs(4, 16, 12, seed=1)
    full = m.forward(x).data
    ablated = m.with_config(use_film=False).forward(x).data
    assert np.array_equal(full, ablated)


def test_spd_neutrality():
    m = toy_model(seed=2)
    m.params["scale.W2"].data[:] = 0.0
    m.params["scale.b2"].data[:] = np.log(np.expm1(1.0 - EPSILON_FLOOR))
    x = anisotropic_inputs(4, 16, 12, seed=2)
    trace = {}
    full = m.forward(x, trace).data
    assert np.abs(trace["triads"] - x[..., :9]).max() <= 1e-9
    ablated = m.with_config(use_spd=False).forward(x).data
    assert np.abs(full - ablated).max() <= 1e-7


def test_n_layers_zero_identity_encoder():
    m = toy_model(n_layers=0)
    trace = {}
    m.forward(anisotropic_inputs(2, 16, 12), trace)
    assert np.array_equal(trace["H"], trace["tokens"])


def test_attention_rows_sum_to_one():
    m = toy_model(n_layers=2, std=1.0)
    trace = {}
    m.forward(anisotropic_inputs(3, 16, 12), trace)
    assert len(trace["attention"]) == 2
    for w in trace["attention"]:
        assert w.shape == (3, 2, 25 * 8, 25 * 8)
        assert np.abs(w.sum(-1) - 1).max() <= 1e-12


def test_channel_permutation_equivariance():
    m = toy_model(seed=3)
    x = anisotropic_inputs(2, 16, 12, seed=3)
    a, b = 9, 10  # two telemetry channels, both in the invariant set
    base = m.forward(x).data
    xp = x.copy()
    xp[..., [a, b]] = x[..., [b, a]]
    table = m.params["pos.channel"].data
    table[[a, b]] = table[[b, a]]
    perm = m.forward(xp).data
    np.testing.assert_allclose(perm[:, [a, b]], base[:, [b, a]], atol=1e-12)
    others = [c for c in range(base.shape[1]) if c not in (a, b)]
    np.testing.assert_allclose(perm[:, others], base[:, others], atol=1e-12)


def test_rotation_chain():
    m = toy_model(seed=4)
    x = anisotropic_inputs(50, 16, 12, seed=4)
    spectra = gram_spectra(x[..., :9])
    assert np.min(np.minimum(spectra["gap12"], spectra["gap23"])) >= 0.05
    R = random_rotations(50, np.random.default_rng(5))
    t0, t1 = {}, {}
    m.forward(x, t0)
    m.forward(rotate_inputs(x, R), t1)
    for key in ("s", "sigma", "gamma", "beta"):
        assert np.abs(t1[key] - t0[key]).max() <= 1e-9 * max(1.0, np.abs(t0[key]).max()), key
    z0, z1 = t0["Z"][..., 9:], t1["Z"][..., 9:]
    assert np.abs(z1 - z0).max() <= 1e-9 * np.abs(z0).max()
    expected = rotate_inputs(np.concatenate([t0["triads"], x[..., 9:]], -1), R)[..., :9]
    assert np.abs(t1["triads"] - expected).max() <= 1e-6 * np.abs(expected).max()


def test_deterministic_forward_and_single_window():
    m = toy_model(seed=5)
    x = anisotropic_inputs(3, 16, 12, seed=5)
    assert np.array_equal(m.predict(x), m.predict(x))
    w = TriadWindow.from_matrix(x[0])
    np.testing.assert_allclose(navformer_forward(w, m), m.predict(x)[0], rtol=1e-12, atol=1e-14)
    with pytest.raises(ShapeMismatch):
        m.predict(x[:, :10])


def test_prepared_inputs_match_raw():
    m = toy_model(seed=6)
    x = anisotropic_inputs(3, 16, 12, seed=6)
    np.testing.assert_array_equal(m.forward(prepare_inputs(x, m.config)).data, m.forward(x).data)


@pytest.mark.parametrize("changes", [
    {}, {"use_spd": False}, {"use_film": False}, {"use_harmonics": False},
    {"ff_activation": "relu", "aux_loss_weight": 0.5},
])
def test_gradients_sampled(changes):
    m = toy_model(seed=7, **changes)
    x = anisotropic_inputs(2, 16, 12, seed=7)
    future = np.random.default_rng(8).normal(size=(2, 4, 12))
    results = model_gradcheck(m, x, future, max_entries=6)
    assert len({r[0] for r in results}) == len(m.params)
    assert not gradcheck_failures(results)


def test_gradient_flows_into_every_group():
    m = toy_model(seed=9)
    x = anisotropic_inputs(2, 16, 12, seed=9)
    future = np.random.default_rng(10).normal(size=(2, 4, 12))
    m.loss(x, future).backward()
    for name, p in m.params.items():
        assert p.grad is not None and np.abs(p.grad).max() > 0, name
