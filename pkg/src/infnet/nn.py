"""Network building blocks: parameter containers, MLPs, (B)LSTMs, embeddings, tag LM."""

from __future__ import annotations

import hashlib
import logging
from typing import Iterator, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

logger = logging.getLogger(__name__)

SIMPLEX_TOL = 1e-6


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    r = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-r, r, size=shape or (fan_in, fan_out))


class Module:
    """Named container of parameters and child modules."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._children: dict[str, Module] = {}

    def add_param(self, name: str, data) -> Tensor:
        t = ad.parameter(data, name=name)
        self._params[name] = t
        setattr(self, name, t)
        return t

    def add_child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        setattr(self, name, module)
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, t in self._params.items():
            full = prefix + name
            t.name = full
            yield full, t
        for name, child in self._children.items():
            yield from child.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: t.data.copy() for name, t in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        unexpected = set(state) - set(own)
        if missing or unexpected:
            raise KeyError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(unexpected)}")
        for name, t in own.items():
            value = np.asarray(state[name], dtype=ad.DTYPE)
            if value.shape != t.shape:
                raise ShapeError(f"{name}: expected shape {t.shape}, got {value.shape}")
            t.data[...] = value

    def set_trainable(self, flag: bool) -> None:
        for t in self.parameters():
            t.requires_grad = flag
            t.grad = None

    def zero_grad(self) -> None:
        for t in self.parameters():
            t.grad = None

    def param_hash(self) -> str:
        h = hashlib.sha256()
        for name, t in self.named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()


def l2_norm_sq(params: Sequence[Tensor]) -> Tensor:
    total = ad.Tensor(0.0)
    for p in params:
        total = total + ad.tsum(p * p)
    return total


def l2_distance_sq(params: Sequence[Tensor], anchors: Sequence[np.ndarray]) -> Tensor:
    total = ad.Tensor(0.0)
    for p, a in zip(params, anchors):
        diff = p - a
        total = total + ad.tsum(diff * diff)
    return total


# -- feed-forward -----------------------------------------------------------
_ACTIVATIONS = {
    "tanh": ad.tanh,
    "sigmoid": ad.sigmoid,
    "relu": ad.relu,
    "identity": lambda t: t,
}


class MLP(Module):
    """Feed-forward net; ``widths = (input, hidden..., output)``."""

    def __init__(self, widths: Sequence[int], rng: np.random.Generator, hidden: str = "tanh", head: str = "sigmoid"):
        super().__init__()
        if len(widths) < 3:
            raise ValueError(f"MLP needs at least one hidden layer, got widths {tuple(widths)}")
        if head not in ("sigmoid", "softmax", "linear"):
            raise ValueError(f"unknown output head {head!r}")
        self.widths = tuple(int(w) for w in widths)
        self.hidden = hidden
        self.head = head
        for k, (n_in, n_out) in enumerate(zip(self.widths[:-1], self.widths[1:])):
            self.add_param(f"w{k}", glorot(rng, n_in, n_out))
            self.add_param(f"b{k}", np.zeros(n_out))
        self.n_layers = len(self.widths) - 1

    def layer(self, k: int) -> tuple[Tensor, Tensor]:
        return self._params[f"w{k}"], self._params[f"b{k}"]

    def features(self, x) -> Tensor:
        """Output of the last hidden layer."""
        x = ad.as_tensor(x)
        if x.shape[-1] != self.widths[0]:
            raise ShapeError(f"mlp: input dimension {x.shape[-1]} != {self.widths[0]}")
        act = _ACTIVATIONS[self.hidden]
        for k in range(self.n_layers - 1):
            w, b = self.layer(k)
            x = act(ad.affine(x, w, b))
        return x

    def logits(self, x) -> Tensor:
        w, b = self.layer(self.n_layers - 1)
        return ad.affine(self.features(x), w, b)

    def forward(self, x) -> Tensor:
        z = self.logits(x)
        if self.head == "sigmoid":
            return ad.sigmoid(z)
        if self.head == "softmax":
            return ad.softmax(z, axis=-1)
        return z

    __call__ = forward


def mlp_forward(net: MLP, x) -> np.ndarray:
    with ad.no_grad():
        return net.forward(np.asarray(x, dtype=float)).data


# -- recurrent ---------------------------------------------------------------
class LSTM(Module):
    def __init__(self, input_dim: int, hidden_dim: int, rng: np.random.Generator):
        super().__init__()
        self.input_dim, self.hidden_dim = input_dim, hidden_dim
        self.add_param("w_in", glorot(rng, input_dim, 4 * hidden_dim))
        self.add_param("w_rec", glorot(rng, hidden_dim, 4 * hidden_dim))
        bias = np.zeros(4 * hidden_dim)
        bias[hidden_dim : 2 * hidden_dim] = 1.0
        self.add_param("bias", bias)

    def forward(self, x: Tensor, reverse: bool = False) -> Tensor:
        return ad.lstm(x, self.w_in, self.w_rec, self.bias, reverse=reverse)

    __call__ = forward


class BLSTMEncoder(Module):
    """Bidirectional LSTM whose 2d concatenated states are projected to d with tanh."""

    def __init__(self, input_dim: int, hidden_dim: int, rng: np.random.Generator):
        super().__init__()
        self.input_dim, self.hidden_dim = input_dim, hidden_dim
        self.add_child("fwd", LSTM(input_dim, hidden_dim, rng))
        self.add_child("bwd", LSTM(input_dim, hidden_dim, rng))
        self.add_param("w_proj", glorot(rng, 2 * hidden_dim, hidden_dim))
        self.add_param("b_proj", np.zeros(hidden_dim))

    @property
    def output_dim(self) -> int:
        return self.hidden_dim

    def forward(self, x) -> Tensor:
        x = ad.as_tensor(x)
        if x.ndim != 3 or x.shape[1] == 0:
            raise ShapeError(f"blstm: expected nonempty (B, N, D) input, got shape {x.shape}")
        h = ad.concat([self.fwd(x), self.bwd(x, reverse=True)], axis=-1)
        return ad.tanh(ad.affine(h, self.w_proj, self.b_proj))

    __call__ = forward


class EmbeddingTable:
    """Frozen token embeddings; the last row is the unknown-token vector."""

    def __init__(self, vocab: dict[str, int], matrix: np.ndarray):
        self.vocab = dict(vocab)
        self.matrix = np.asarray(matrix, dtype=ad.DTYPE)
        if self.matrix.shape[0] != len(self.vocab) + 1:
            raise ValueError("embedding matrix must have one row per token plus the unknown row")

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    @property
    def unk_index(self) -> int:
        return len(self.vocab)

    def lookup(self, tokens: Sequence[str]) -> np.ndarray:
        unk = self.unk_index
        return np.array([self.vocab.get(tok, unk) for tok in tokens], dtype=np.int64)

    def vector(self, token: str) -> np.ndarray:
        return self.matrix[self.vocab.get(token, self.unk_index)]

    def embed(self, ids: np.ndarray) -> Tensor:
        return Tensor(self.matrix[ids])

    @classmethod
    def from_vectors(cls, tokens: Sequence[str], vectors: np.ndarray) -> "EmbeddingTable":
        vectors = np.asarray(vectors, dtype=ad.DTYPE)
        unk = vectors.mean(axis=0, keepdims=True)
        return cls({tok: i for i, tok in enumerate(tokens)}, np.vstack([vectors, unk]))

    @classmethod
    def random(cls, tokens: Sequence[str], dim: int, rng: np.random.Generator) -> "EmbeddingTable":
        tokens = sorted(set(tokens))
        return cls.from_vectors(tokens, rng.normal(0.0, 1.0 / np.sqrt(dim), size=(len(tokens), dim)))


def load_embeddings(path, dim: int) -> EmbeddingTable:
    """Read ``token v1 ... v_dim`` lines, with an optional ``count dim`` header."""
    tokens: list[str] = []
    rows: list[list[float]] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            fields = line.rstrip("\n").split(" ")
            if lineno == 1 and len(fields) == 2 and all(f.isdigit() for f in fields) and dim != 1:
                if int(fields[1]) != dim:
                    raise ValueError(f"{path}:1: header declares dim {fields[1]}, expected {dim}")
                continue
            if fields == [""]:
                continue
            if len(fields) != dim + 1:
                raise ValueError(f"{path}:{lineno}: expected {dim} values, found {len(fields) - 1}")
            try:
                rows.append([float(v) for v in fields[1:]])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-numeric embedding value") from None
            tokens.append(fields[0])
    if not rows:
        raise ValueError(f"{path}: no embedding vectors found")
    return EmbeddingTable.from_vectors(tokens, np.array(rows))


def write_embeddings(path, table: EmbeddingTable) -> None:
    inverse = sorted(table.vocab.items(), key=lambda kv: kv[1])
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"{len(inverse)} {table.dim}\n")
        for tok, row in inverse:
            fh.write(tok + " " + " ".join(repr(float(v)) for v in table.matrix[row]) + "\n")


def blstm_encode(enc: BLSTMEncoder, table: EmbeddingTable, tokens: Sequence[str]) -> np.ndarray:
    if len(tokens) == 0:
        raise ShapeError("blstm_encode: empty sequence")
    with ad.no_grad():
        x = table.embed(table.lookup(tokens))[None]
        return enc(x).data[0]


# -- tag language model ------------------------------------------------------
class TagLMCell(Module):
    """LSTM language model over tag vectors.

    Inputs live in ``n_tags + 1`` dimensions (tags plus start-of-sequence);
    the softmax ranges over ``n_tags + 1`` symbols (tags plus end-of-sequence).
    Inputs may be any point of the simplex, not only one-hot vectors.
    """

    def __init__(self, n_tags: int, hidden_dim: int, rng: np.random.Generator, n_layers: int = 1, dropout: float = 0.5):
        super().__init__()
        self.n_tags, self.hidden_dim, self.n_layers, self.dropout = n_tags, hidden_dim, n_layers, dropout
        self.training = False
        dims = [n_tags + 1] + [hidden_dim] * n_layers
        for k in range(n_layers):
            self.add_child(f"lstm{k}", LSTM(dims[k], hidden_dim, rng))
        self.add_param("w_out", glorot(rng, hidden_dim, n_tags + 1))
        self.add_param("b_out", np.zeros(n_tags + 1))

    @property
    def bos(self) -> int:
        return self.n_tags

    @property
    def eos(self) -> int:
        return self.n_tags

    @property
    def n_out(self) -> int:
        return self.n_tags + 1

    def train(self, mode: bool = True) -> "TagLMCell":
        self.training = mode
        return self

    def log_probs(self, inputs, rng: np.random.Generator | None = None) -> Tensor:
        """Next-symbol log-distributions for every prefix of ``inputs`` (B, T, n_tags+1)."""
        h = ad.as_tensor(inputs)
        for k in range(self.n_layers):
            h = self._children[f"lstm{k}"](h)
            if self.training and self.dropout > 0:
                if rng is None:
                    raise ValueError("training-mode dropout needs an rng")
                keep = (rng.random(h.shape) >= self.dropout) / (1.0 - self.dropout)
                h = h * keep
        return ad.log_softmax(ad.affine(h, self.w_out, self.b_out), axis=-1)

    def probs(self, inputs) -> Tensor:
        return ad.exp(self.log_probs(inputs))

    def input_sequence(self, y) -> Tensor:
        """Prepend the start symbol to relaxed tags ``y`` of shape (B, N, n_tags)."""
        y = ad.as_tensor(y)
        B = y.shape[0]
        bos = np.zeros((B, 1, self.n_tags + 1))
        bos[:, 0, self.bos] = 1.0
        padded = ad.concat([y, np.zeros((B, y.shape[1], 1))], axis=-1)
        return ad.concat([bos, padded], axis=1)

    def target_sequence(self, y) -> Tensor:
        """Append the end symbol to relaxed tags ``y`` of shape (B, N, n_tags)."""
        y = ad.as_tensor(y)
        B = y.shape[0]
        eos = np.zeros((B, 1, self.n_tags + 1))
        eos[:, 0, self.eos] = 1.0
        padded = ad.concat([y, np.zeros((B, y.shape[1], 1))], axis=-1)
        return ad.concat([padded, eos], axis=1)

    def sequence_nll(self, tags: Sequence[int]) -> float:
        """Negative log-likelihood of a discrete tag sequence, via integer indexing."""
        inputs = np.zeros((1, len(tags) + 1, self.n_tags + 1))
        inputs[0, 0, self.bos] = 1.0
        inputs[0, np.arange(1, len(tags) + 1), list(tags)] = 1.0
        targets = list(tags) + [self.eos]
        with ad.no_grad():
            lp = self.log_probs(inputs).data[0]
        return float(-lp[np.arange(len(targets)), targets].sum())


def _check_simplex(vectors: np.ndarray, what: str) -> None:
    if np.any(vectors < -SIMPLEX_TOL) or np.any(np.abs(vectors.sum(axis=-1) - 1.0) > SIMPLEX_TOL):
        raise ValueError(f"{what}: vector outside the probability simplex (tolerance {SIMPLEX_TOL})")


def tag_lm_next(cell: TagLMCell, prefix) -> np.ndarray:
    """Distribution over the next symbol (n_tags tags + end) given a prefix starting with BOS."""
    prefix = np.asarray(prefix, dtype=float)
    if prefix.ndim != 2 or prefix.shape[1] != cell.n_tags + 1 or prefix.shape[0] == 0:
        raise ShapeError(f"tag_lm_next: prefix must have shape (T, {cell.n_tags + 1}), got {prefix.shape}")
    _check_simplex(prefix, "tag_lm_next")
    if prefix[0, cell.bos] < 1.0 - SIMPLEX_TOL:
        raise ValueError("tag_lm_next: prefix must begin with the start-of-sequence vector")
    with ad.no_grad():
        return cell.probs(prefix[None]).data[0, -1]
