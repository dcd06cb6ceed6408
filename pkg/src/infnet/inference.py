"""Ways of producing outputs: inference networks, gradient-descent inference,
exact chain dynamic programs, and discretization."""

from __future__ import annotations

import copy
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import NumericError, ShapeError, Tensor
from .nn import MLP, BLSTMEncoder, EmbeddingTable, Module, glorot


# -- inference networks ------------------------------------------------------
class MLCInferenceNet(Module):
    """Feed-forward net with a sigmoid head: x -> [0, 1]^L."""

    relaxation = "box"

    def __init__(self, input_dim: int, hidden: Sequence[int], n_labels: int, rng: np.random.Generator):
        super().__init__()
        self.add_child("mlp", MLP([input_dim, *hidden, n_labels], rng, head="sigmoid"))

    @property
    def n_labels(self) -> int:
        return self.mlp.widths[-1]

    def logits(self, x) -> Tensor:
        return self.mlp.logits(x)

    def forward(self, x) -> Tensor:
        return self.mlp(x)

    __call__ = forward


class SeqInferenceNet(Module):
    """BLSTM over frozen embeddings with a per-position softmax head: ids -> (N, L) simplex rows."""

    relaxation = "simplex"

    def __init__(self, table: EmbeddingTable, hidden_dim: int, n_labels: int, rng: np.random.Generator):
        super().__init__()
        self.table = table
        self.add_child("encoder", BLSTMEncoder(table.dim, hidden_dim, rng))
        self.add_param("w_out", glorot(rng, hidden_dim, n_labels))
        self.add_param("b_out", np.zeros(n_labels))

    @property
    def n_labels(self) -> int:
        return self.w_out.shape[1]

    def logits(self, ids) -> Tensor:
        feats = self.encoder(self.table.embed(np.asarray(ids)))
        return ad.affine(feats, self.w_out, self.b_out)

    def forward(self, ids) -> Tensor:
        return ad.softmax(self.logits(ids), axis=-1)

    def log_probs(self, ids) -> Tensor:
        return ad.log_softmax(self.logits(ids), axis=-1)

    __call__ = forward


def clone_module(module: Module) -> Module:
    """Deep copy of a module's parameters sharing any frozen embedding table."""
    table = getattr(module, "table", None)
    memo = {id(table): table} if table is not None else {}
    return copy.deepcopy(module, memo)


def infnet_predict(net, x) -> np.ndarray:
    """Relaxed output for one input (feature vector or token-id sequence)."""
    with ad.no_grad():
        return net(np.asarray(x)[None]).data[0]


# -- gradient-descent inference ---------------------------------------------
def gd_inference(energy, x, steps: int = 100, step_size: float = 0.1, max_halvings: int = 5):
    """Minimize ``energy.energy(x, y)`` over the relaxed domain by projected gradient descent.

    Box relaxations clip to [0, 1]; simplex relaxations optimize unconstrained
    logits mapped through a softmax.  Starts from the uniform output and
    halves the step (at most ``max_halvings`` times) whenever the energy
    would increase.  Returns ``(y, trajectory)``.
    """
    if steps < 0:
        raise ValueError("steps must be nonnegative")
    shape = energy.relaxed_shape(x)
    simplex = energy.relaxation == "simplex"
    z = np.zeros(shape) if simplex else np.full(shape, 0.5)

    def evaluate(point):
        var = ad.Tensor(point, requires_grad=True)
        y = ad.softmax(var, axis=-1) if simplex else var
        e = energy.energy(x, y, check=False)
        if not np.isfinite(e.data):
            raise NumericError(f"gradient-descent inference hit a non-finite energy {e.item()}")
        return e.item(), ad.grad(e, [var])[0]

    current, g = evaluate(z)
    trajectory = [current]
    for _ in range(steps):
        step = step_size
        for _ in range(max_halvings + 1):
            cand = z - step * g
            if not simplex:
                cand = np.clip(cand, 0.0, 1.0)
            value, cand_g = evaluate(cand)
            if value <= current:
                break
            step /= 2.0
        else:
            break
        z, current, g = cand, value, cand_g
        trajectory.append(current)
    y = ad.softmax(ad.Tensor(z), axis=-1).data if simplex else z
    return y, trajectory


# -- exact chain inference ----------------------------------------------------
def _check_chain(unary: np.ndarray, W: np.ndarray) -> None:
    if unary.ndim != 2 or unary.shape[0] == 0:
        raise ShapeError(f"chain inference needs a nonempty (N, L) score table, got {unary.shape}")
    if W.shape != (unary.shape[1], unary.shape[1]):
        raise ShapeError(f"transition matrix {W.shape} does not match {unary.shape[1]} labels")
    if not (np.all(np.isfinite(unary)) and np.all(np.isfinite(W))):
        raise NumericError("chain inference needs finite scores")


def viterbi(unary, W) -> tuple[list[int], float]:
    """Highest-scoring labeling of ``sum_t unary[t, y_t] + sum_t W[y_{t-1}, y_t]``.

    Ties resolve toward lower label indices.
    """
    unary = np.asarray(unary, dtype=float)
    W = np.asarray(W, dtype=float)
    _check_chain(unary, W)
    N = unary.shape[0]
    delta = unary[0].copy()
    back = np.zeros(unary.shape, dtype=np.int64)
    for t in range(1, N):
        cand = delta[:, None] + W
        back[t] = np.argmax(cand, axis=0)
        delta = cand[back[t], np.arange(W.shape[1])] + unary[t]
    best = int(np.argmax(delta))
    score = float(delta[best])
    path = [best]
    for t in range(N - 1, 0, -1):
        best = int(back[t, best])
        path.append(best)
    return path[::-1], score


def _forward_backward_batch(unary: np.ndarray, W: np.ndarray):
    """Log-space forward-backward over a batch of equal-length chains (B, N, L)."""
    B, N, L = unary.shape
    alpha = np.empty((B, N, L))
    beta = np.zeros((B, N, L))
    alpha[:, 0] = unary[:, 0]
    for t in range(1, N):
        alpha[:, t] = np.logaddexp.reduce(alpha[:, t - 1, :, None] + W, axis=1) + unary[:, t]
    for t in range(N - 2, -1, -1):
        beta[:, t] = np.logaddexp.reduce(W + (unary[:, t + 1] + beta[:, t + 1])[:, None, :], axis=2)
    log_z = np.logaddexp.reduce(alpha[:, -1], axis=-1)
    marginals = np.exp(alpha + beta - log_z[:, None, None])
    pair = np.exp(
        alpha[:, :-1, :, None] + W + (unary[:, 1:] + beta[:, 1:])[:, :, None, :] - log_z[:, None, None, None]
    )
    return log_z, marginals, pair


def forward_backward(unary, W):
    """Return ``(log_z, marginals (N, L), pair_marginals (N-1, L, L))``."""
    unary = np.asarray(unary, dtype=float)
    W = np.asarray(W, dtype=float)
    _check_chain(unary, W)
    log_z, marg, pair = _forward_backward_batch(unary[None], W)
    return float(log_z[0]), marg[0], pair[0]


def crf_log_partition(unary, W) -> Tensor:
    """Differentiable log-partition of a batch of chains; gradients are the marginals."""
    unary, W = ad.as_tensor(unary), ad.as_tensor(W)
    if unary.ndim != 3 or unary.shape[1] == 0:
        raise ShapeError(f"crf_log_partition needs (B, N, L) scores, got {unary.shape}")
    log_z, marg, pair = _forward_backward_batch(unary.data, W.data)

    def bw(g):
        return g[:, None, None] * marg, np.einsum("b,bnij->ij", g, pair)

    return ad._make(log_z, (unary, W), bw, "crf_log_partition")


def chain_path_score(unary, W, labels) -> Tensor:
    """Differentiable score of gold labelings ``labels`` (B, N) under (B, N, L) scores."""
    unary, W = ad.as_tensor(unary), ad.as_tensor(W)
    labels = np.asarray(labels)
    B, N = labels.shape
    rows = np.arange(B)[:, None]
    cols = np.arange(N)[None, :]
    score = ad.tsum(unary[rows, cols, labels], axis=1)
    if N > 1:
        score = score + ad.tsum(W[labels[:, :-1], labels[:, 1:]], axis=1)
    return score


# -- discretization ------------------------------------------------------------
def discretize(y, tau: float | None = None):
    """Threshold an MLC output at ``tau`` or take per-position argmax for sequences."""
    y = np.asarray(y, dtype=float)
    if y.ndim == 1:
        if tau is None or not 0.0 <= tau <= 1.0:
            raise ValueError("multi-label discretization needs a threshold in [0, 1]")
        return set(int(i) for i in np.flatnonzero(y > tau))
    return [int(i) for i in np.argmax(y, axis=-1)]


# -- batched decoders ----------------------------------------------------------
def decode_infnet(net: SeqInferenceNet, sequences: Sequence[np.ndarray], batch_size: int = 32) -> list[list[int]]:
    """Argmax of the inference network's per-position distributions."""
    from .data import batch_indices

    out: list[list[int] | None] = [None] * len(sequences)
    with ad.no_grad():
        for idx in batch_indices([len(s) for s in sequences], batch_size):
            probs = net(np.stack([sequences[i] for i in idx])).data
            for i, row in zip(idx, probs):
                out[i] = discretize(row)
    return out


def decode_viterbi(energy, sequences: Sequence[np.ndarray], batch_size: int = 32) -> list[list[int]]:
    """Exact decoding: batched feature computation, then Viterbi per sentence."""
    from .data import batch_indices

    out: list[list[int] | None] = [None] * len(sequences)
    W = energy_transitions(energy)
    with ad.no_grad():
        for idx in batch_indices([len(s) for s in sequences], batch_size):
            unary = energy.unary(np.stack([sequences[i] for i in idx])).data
            for i, u in zip(idx, unary):
                out[i] = viterbi(u, W)[0]
    return out


def energy_transitions(energy) -> np.ndarray:
    chain = getattr(energy, "chain", energy)
    return chain.transitions.data
