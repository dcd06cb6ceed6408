"""Energy functions over discrete or relaxed structured outputs (lower is better).

Every energy exposes ``batch_energy(x, y)`` returning one energy per example
and ``energy(x, y)`` for a single example with domain validation.
"""

from __future__ import annotations

import logging

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .nn import MLP, SIMPLEX_TOL, BLSTMEncoder, EmbeddingTable, Module, TagLMCell, glorot

logger = logging.getLogger(__name__)

LOG_FLOOR = 1e-12


def _check_box(y: np.ndarray) -> None:
    if np.any(y < -SIMPLEX_TOL) or np.any(y > 1.0 + SIMPLEX_TOL):
        raise ValueError("relaxed multi-label output must lie in [0, 1]^L")


def _check_simplex_rows(y: np.ndarray) -> None:
    if np.any(y < -SIMPLEX_TOL) or np.any(np.abs(y.sum(axis=-1) - 1.0) > SIMPLEX_TOL):
        raise ValueError("each relaxed tag vector must lie on the probability simplex")


def one_hot(labels, n_labels: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    out = np.zeros(labels.shape + (n_labels,))
    np.put_along_axis(out, labels[..., None], 1.0, axis=-1)
    return out


class MLCEnergy(Module):
    """``E(x, y) = sum_i y_i b_i^T F(x) + c2^T softplus(C1 y)``.

    ``F`` is the hidden stack of a (frozen) feature MLP.
    """

    relaxation = "box"

    def __init__(self, feature_net: MLP, n_labels: int, rng: np.random.Generator, n_hidden: int = 16):
        super().__init__()
        self.n_labels = n_labels
        self.feature_net = feature_net
        n_feat = feature_net.widths[-2]
        self.add_param("label_vectors", glorot(rng, n_labels, n_feat))
        self.add_param("c1", glorot(rng, n_hidden, n_labels))
        self.add_param("c2", glorot(rng, n_hidden, 1).reshape(-1))

    def theta_parameters(self) -> list[Tensor]:
        return [self.label_vectors, self.c1, self.c2]

    def features(self, x) -> Tensor:
        return self.feature_net.features(x)

    def local_energy(self, feats, y) -> Tensor:
        scores = ad.matmul(feats, ad.transpose(self.label_vectors))
        return ad.tsum(ad.as_tensor(y) * scores, axis=-1)

    def label_energy(self, y) -> Tensor:
        return ad.matmul(ad.softplus(ad.matmul(y, ad.transpose(self.c1))), self.c2)

    def energy_from_features(self, feats, y) -> Tensor:
        y = ad.as_tensor(y)
        return self.local_energy(feats, y) + self.label_energy(y)

    def batch_energy(self, x, y) -> Tensor:
        return self.energy_from_features(self.features(x), y)

    def energy(self, x, y, check: bool = True) -> Tensor:
        y = ad.as_tensor(y)
        if check:
            _check_box(y.data)
        return self.batch_energy(np.asarray(x, dtype=float)[None], y.reshape(1, -1)).reshape(())

    def relaxed_shape(self, x) -> tuple[int, ...]:
        return (self.n_labels,)


def mlc_energy(m: MLCEnergy, x, y) -> float:
    with ad.no_grad():
        return m.energy(x, y).item()


class ChainEnergy(Module):
    """Linear-chain energy with BLSTM input features over frozen embeddings.

    ``E(x, y) = -(sum_t sum_i y_ti U_i^T f(x, t) + sum_{t>=2} y_{t-1}^T W y_t)``
    """

    relaxation = "simplex"

    def __init__(self, table: EmbeddingTable, hidden_dim: int, n_labels: int, rng: np.random.Generator):
        super().__init__()
        self.table = table
        self.n_labels = n_labels
        self.add_child("encoder", BLSTMEncoder(table.dim, hidden_dim, rng))
        self.add_param("label_vectors", glorot(rng, n_labels, hidden_dim))
        self.add_param("transitions", np.zeros((n_labels, n_labels)))

    def theta_parameters(self) -> list[Tensor]:
        return self.parameters()

    def features(self, ids) -> Tensor:
        ids = np.asarray(ids)
        return self.encoder(self.table.embed(ids))

    def unary(self, ids) -> Tensor:
        """Per-position label scores ``U_i^T f(x, t)``, shape (B, N, L)."""
        return ad.matmul(self.features(ids), ad.transpose(self.label_vectors))

    def energy_from_unary(self, unary, y) -> Tensor:
        y = ad.as_tensor(y)
        local = ad.tsum(y * unary, axis=(-2, -1))
        if y.shape[-2] < 2:
            return -local
        prev = ad.matmul(y[..., :-1, :], self.transitions)
        pair = ad.tsum(prev * y[..., 1:, :], axis=(-2, -1))
        return -(local + pair)

    def batch_energy(self, ids, y) -> Tensor:
        ids = np.asarray(ids)
        if ad.as_tensor(y).shape[:2] != ids.shape:
            raise ShapeError(f"chain energy: output shape {ad.as_tensor(y).shape} does not match input {ids.shape}")
        return self.energy_from_unary(self.unary(ids), y)

    def energy(self, ids, y, check: bool = True) -> Tensor:
        ids = np.asarray(ids)
        y = ad.as_tensor(y)
        if y.ndim != 2 or y.shape[0] != ids.shape[0]:
            raise ShapeError(f"chain energy: {ids.shape[0]} tokens but output shape {y.shape}")
        if check:
            _check_simplex_rows(y.data)
        return self.batch_energy(ids[None], y.reshape((1,) + y.shape)).reshape(())

    def discrete_energy(self, ids, labels) -> float:
        """Energy of a discrete labeling by direct table lookup."""
        with ad.no_grad():
            unary = self.unary(np.asarray(ids)[None]).data[0]
        labels = list(labels)
        total = sum(unary[t, k] for t, k in enumerate(labels))
        total += sum(self.transitions.data[a, b] for a, b in zip(labels[:-1], labels[1:]))
        return -float(total)

    def relaxed_shape(self, ids) -> tuple[int, ...]:
        return (len(ids), self.n_labels)


def chain_energy(c: ChainEnergy, x, y) -> float:
    with ad.no_grad():
        return c.energy(x, y).item()


class TLMEnergy(Module):
    """Negative log-likelihood of relaxed tag sequences under a frozen tag LM.

    Inner products are clamped at 1e-12 before the log; ``n_clamped``
    counts how often that happened.
    """

    relaxation = "simplex"

    def __init__(self, cell: TagLMCell):
        super().__init__()
        self.add_child("cell", cell)
        cell.set_trainable(False)
        cell.train(False)
        self.n_clamped = 0

    @property
    def n_labels(self) -> int:
        return self.cell.n_tags

    def theta_parameters(self) -> list[Tensor]:
        return []

    def batch_energy(self, x, y) -> Tensor:
        y = ad.as_tensor(y)
        log_p = self.cell.log_probs(self.cell.input_sequence(y))
        target = self.cell.target_sequence(y)
        inner = ad.tsum(target * ad.exp(log_p), axis=-1)
        clamped = int(np.sum(inner.data < LOG_FLOOR))
        if clamped:
            self.n_clamped += clamped
            logger.debug("tag LM energy clamped %d inner products", clamped)
        return -ad.tsum(ad.log(ad.clamp_min(inner, LOG_FLOOR)), axis=-1)

    def energy(self, x, y, check: bool = True) -> Tensor:
        y = ad.as_tensor(y)
        if check:
            _check_simplex_rows(y.data)
        return self.batch_energy(None, y.reshape((1,) + y.shape)).reshape(())


def tlm_energy(t: TLMEnergy, y) -> float:
    with ad.no_grad():
        return t.energy(None, y).item()


class JointEnergy(Module):
    """``chain(x, y) + weight * tlm(y)``."""

    relaxation = "simplex"

    def __init__(self, chain: ChainEnergy, tlm: TLMEnergy, weight: float):
        super().__init__()
        self.add_child("chain", chain)
        self.add_child("tlm", tlm)
        self.weight = float(weight)

    @property
    def n_labels(self) -> int:
        return self.chain.n_labels

    @property
    def table(self) -> EmbeddingTable:
        return self.chain.table

    def theta_parameters(self) -> list[Tensor]:
        return self.chain.theta_parameters()

    def unary(self, ids) -> Tensor:
        return self.chain.unary(ids)

    def batch_energy(self, ids, y) -> Tensor:
        e = self.chain.batch_energy(ids, y)
        if self.weight == 0.0:
            return e
        return e + self.weight * self.tlm.batch_energy(ids, y)

    def energy(self, ids, y, check: bool = True) -> Tensor:
        ids = np.asarray(ids)
        y = ad.as_tensor(y)
        if check:
            _check_simplex_rows(y.data)
        return self.batch_energy(ids[None], y.reshape((1,) + y.shape)).reshape(())

    def relaxed_shape(self, ids) -> tuple[int, ...]:
        return (len(ids), self.n_labels)


def joint_energy(j: JointEnergy, x, y) -> float:
    with ad.no_grad():
        return j.energy(x, y).item()
