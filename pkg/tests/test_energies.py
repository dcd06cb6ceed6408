import itertools
import math

import numpy as np
import pytest
from conftest import make_chain
from oracles import brute_force_argmax

from infnet import autodiff as ad
from infnet.energies import (
    JointEnergy,
    MLCEnergy,
    TLMEnergy,
    chain_energy,
    joint_energy,
    mlc_energy,
    one_hot,
    tlm_energy,
)
from infnet.inference import viterbi
from infnet.nn import MLP, TagLMCell


def identity_feature_net(dim, rng):
    net = MLP([dim, dim, 1], rng, hidden="identity", head="linear")
    w, b = net.layer(0)
    w.data[...] = np.eye(dim)
    b.data[...] = 0.0
    return net


def test_mlc_energy_at_zero_output(rng):
    energy = MLCEnergy(MLP([5, 4, 3], rng), 3, rng, n_hidden=7)
    energy.c2.data[...] = 1.0
    x = rng.normal(size=5)
    assert mlc_energy(energy, x, np.zeros(3)) == pytest.approx(7 * math.log(2), abs=1e-12)
    feats = energy.features(x[None])
    assert energy.local_energy(feats, np.zeros((1, 3))).item() == 0.0


def test_mlc_energy_linear_without_label_term(rng):
    energy = MLCEnergy(MLP([5, 4, 3], rng), 3, rng)
    energy.c1.data[...] = 0.0
    energy.c2.data[...] = 0.0
    x, y = rng.normal(size=5), rng.uniform(size=3)
    with ad.no_grad():
        doubled = energy.energy(x, 2 * y, check=False).item()
    assert doubled == pytest.approx(2 * mlc_energy(energy, x, y), abs=1e-12)


def test_mlc_energy_hand_value(rng):
    energy = MLCEnergy(identity_feature_net(2, rng), 2, rng)
    energy.label_vectors.data[...] = [[1.0, 0.0], [0.0, 1.0]]
    energy.c1.data[...] = 0.0
    energy.c2.data[...] = 0.0
    assert mlc_energy(energy, [1.0, -1.0], [1.0, 1.0]) == 0.0
    assert mlc_energy(energy, [1.0, -1.0], [1.0, 0.0]) == 1.0


def test_mlc_energy_rejects_out_of_box_outputs(rng):
    energy = MLCEnergy(MLP([2, 3, 2], rng), 2, rng)
    with pytest.raises(ValueError):
        mlc_energy(energy, [0.0, 0.0], [1.1, 0.0])
    mlc_energy(energy, [0.0, 0.0], [1.0 + 1e-7, 0.0])


def test_mlc_energy_gradients(rng):
    energy = MLCEnergy(MLP([4, 5, 3], rng), 3, rng)
    x = rng.normal(size=(2, 4))
    y = ad.parameter(rng.uniform(0.1, 0.9, size=(2, 3)))
    params = [y, energy.label_vectors, energy.c1, energy.c2]
    assert ad.finite_diff_check(lambda: ad.tsum(energy.batch_energy(x, y)), params) < 1e-4


def test_chain_energy_zero_parameters(small_chain, rng):
    small_chain.label_vectors.data[...] = 0.0
    small_chain.transitions.data[...] = 0.0
    y = rng.dirichlet(np.ones(3), size=4)
    assert chain_energy(small_chain, [0, 1, 2, 3], y) == 0.0


def test_chain_energy_hand_value_agrees_with_enumeration(small_chain):
    unary = np.array([[1.0, 0.0], [0.0, 1.0]])
    W = np.array([[0.0, 1.0], [1.0, 0.0]])
    chain = make_chain(n_labels=2)
    chain.transitions.data[...] = W
    e = chain.energy_from_unary(unary[None], one_hot([0, 1], 2)[None]).item()
    assert e == -3.0
    energies = {}
    for labels in itertools.product(range(2), repeat=2):
        energies[labels] = chain.energy_from_unary(unary[None], one_hot(labels, 2)[None]).item()
    assert min(energies, key=energies.get) == (0, 1)
    assert viterbi(unary, W) == ([0, 1], 3.0)
    assert brute_force_argmax(unary, W) == ([0, 1], 3.0)


def test_chain_energy_one_hot_matches_discrete(small_chain):
    ids = [0, 4, 2, 5]
    for labels in itertools.product(range(3), repeat=4):
        relaxed = chain_energy(small_chain, ids, one_hot(labels, 3))
        assert relaxed == pytest.approx(small_chain.discrete_energy(ids, labels), abs=1e-12)


def test_chain_energy_length_mismatch(small_chain):
    with pytest.raises(ad.ShapeError):
        chain_energy(small_chain, [0, 1, 2], one_hot([0, 1], 3))


def test_chain_energy_gradients(small_chain, rng):
    ids = np.array([[0, 3, 1], [2, 2, 5]])
    z = rng.normal(size=(2, 3, 3))
    y = ad.parameter(np.exp(z) / np.exp(z).sum(-1, keepdims=True))
    params = [y, small_chain.label_vectors, small_chain.transitions, small_chain.encoder.w_proj]
    assert ad.finite_diff_check(lambda: ad.tsum(small_chain.batch_energy(ids, y)), params) < 1e-4


def test_tlm_energy_zero_parameters(rng):
    cell = TagLMCell(4, 6, rng)
    for p in cell.parameters():
        p.data[...] = 0.0
    tlm = TLMEnergy(cell)
    for n in (1, 3, 6):
        y = rng.dirichlet(np.ones(4), size=n)
        # uniform over the 4 tags plus the end symbol at each of the n+1 steps
        assert tlm_energy(tlm, y) == pytest.approx((n + 1) * math.log(5), abs=1e-12)


def test_tlm_energy_one_hot_is_sequence_nll(rng):
    tlm = TLMEnergy(TagLMCell(4, 6, rng))
    for tags in ([0], [3, 1, 1, 2], [2, 0, 3]):
        assert tlm_energy(tlm, one_hot(tags, 4)) == pytest.approx(tlm.cell.sequence_nll(tags), abs=1e-12)


def _bigram_cell(rng):
    """LSTM with a closed forget gate and no recurrence: each step sees only its input."""
    cell = TagLMCell(2, 3, rng)
    lstm = cell.lstm0
    lstm.w_rec.data[...] = 0.0
    lstm.bias.data[3:6] = -1e4
    return cell


def _bigram_table(cell):
    lstm = cell.lstm0
    H = cell.hidden_dim

    def sig(v):
        return 1.0 / (1.0 + np.exp(-v))

    table = np.zeros((3, 3))
    for prev in range(3):
        pre = np.eye(3)[prev] @ lstm.w_in.data + lstm.bias.data
        i, o, g = sig(pre[:H]), sig(pre[2 * H : 3 * H]), np.tanh(pre[3 * H :])
        h = o * np.tanh(i * g)
        logits = h @ cell.w_out.data + cell.b_out.data
        table[prev] = np.exp(logits) / np.exp(logits).sum()
    return table


def test_tlm_energy_hand_built_bigram_table(rng):
    cell = _bigram_cell(rng)
    table = _bigram_table(cell)
    bos = eos = 2
    expected = -(np.log(table[bos, 0]) + np.log(table[0, 1]) + np.log(table[1, eos]))
    assert tlm_energy(TLMEnergy(cell), one_hot([0, 1], 2)) == pytest.approx(expected, abs=1e-12)


def test_tlm_energy_gradient(rng):
    tlm = TLMEnergy(TagLMCell(3, 4, rng))
    y = ad.parameter(rng.dirichlet(np.ones(3), size=(2, 4)))
    assert ad.finite_diff_check(lambda: ad.tsum(tlm.batch_energy(None, y)), [y]) < 1e-4


def test_tlm_parameters_are_frozen(rng):
    tlm = TLMEnergy(TagLMCell(3, 4, rng))
    assert all(not p.requires_grad for p in tlm.parameters())
    assert tlm.theta_parameters() == []


def test_tlm_energy_clamps_vanishing_inner_products(rng):
    cell = TagLMCell(2, 3, rng)
    for p in cell.parameters():
        p.data[...] = 0.0
    cell.b_out.data[...] = [0.0, -1e3, 0.0]
    tlm = TLMEnergy(cell)
    value = tlm_energy(tlm, one_hot([1], 2))
    assert np.isfinite(value) and tlm.n_clamped >= 1


def test_joint_energy_combines_components(small_chain, rng):
    tlm = TLMEnergy(TagLMCell(3, 4, rng))
    ids = [0, 3, 1]
    y = rng.dirichlet(np.ones(3), size=3)
    e1, e2 = chain_energy(small_chain, ids, y), tlm_energy(tlm, y)
    assert joint_energy(JointEnergy(small_chain, tlm, 0.0), ids, y) == e1
    assert joint_energy(JointEnergy(small_chain, tlm, 0.5), ids, y) == pytest.approx(e1 + 0.5 * e2, abs=1e-12)


def test_joint_energy_gradient_is_sum_of_components(small_chain, rng):
    tlm = TLMEnergy(TagLMCell(3, 4, rng))
    joint = JointEnergy(small_chain, tlm, 0.5)
    ids = np.array([[0, 3, 1]])
    y = ad.parameter(rng.dirichlet(np.ones(3), size=(1, 3)))
    assert ad.finite_diff_check(lambda: ad.tsum(joint.batch_energy(ids, y)), [y]) < 1e-4
    g_joint = ad.grad(ad.tsum(joint.batch_energy(ids, y)), [y])[0]
    g_chain = ad.grad(ad.tsum(small_chain.batch_energy(ids, y)), [y])[0]
    g_tlm = ad.grad(ad.tsum(tlm.batch_energy(ids, y)), [y])[0]
    np.testing.assert_allclose(g_joint, g_chain + 0.5 * g_tlm, atol=1e-12)
