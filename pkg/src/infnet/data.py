"""Dataset readers/writers, tagging-scheme conversion, synthetic corpora and auto-tagging."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

logger = logging.getLogger(__name__)


class FormatError(ValueError):
    """A data file does not follow its declared format."""


# -- multi-label data --------------------------------------------------------
@dataclass
class MLCDataset:
    """Sparse-feature multi-label examples; label and feature indices are 0-based."""

    features: list[dict[int, float]]
    labels: list[set[int]]
    n_labels: int
    n_features: int

    def __len__(self) -> int:
        return len(self.labels)

    def dense(self) -> np.ndarray:
        X = np.zeros((len(self), self.n_features))
        for row, feats in enumerate(self.features):
            for idx, value in feats.items():
                X[row, idx] = value
        return X

    def label_matrix(self) -> np.ndarray:
        Y = np.zeros((len(self), self.n_labels))
        for row, labs in enumerate(self.labels):
            Y[row, sorted(labs)] = 1.0
        return Y


def read_mlc(path) -> MLCDataset:
    """Read ``L D`` header then ``l1,l2 idx:val idx:val`` lines; ``#`` starts a comment.

    Empty lines are skipped; a line holding only whitespace is an example
    with no labels and no features.
    """
    header = None
    features, labels = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if line.lstrip().startswith("#") or not line:
                continue
            if header is None:
                parts = line.split()
                if len(parts) != 2 or not all(p.isdigit() for p in parts):
                    raise FormatError(f"{path}:{lineno}: expected header 'L D', got {line!r}")
                header = (int(parts[0]), int(parts[1]))
                continue
            n_labels, n_features = header
            label_field, _, rest = line.partition(" ")
            if ":" in label_field:
                label_field, rest = "", line
            try:
                labs = {int(v) for v in label_field.split(",") if v != ""}
                feats = {}
                for pair in rest.split():
                    idx, _, val = pair.partition(":")
                    feats[int(idx)] = float(val)
            except ValueError:
                raise FormatError(f"{path}:{lineno}: malformed line {line!r}") from None
            if any(not 0 <= v < n_labels for v in labs):
                raise FormatError(f"{path}:{lineno}: label index outside [0, {n_labels})")
            if any(not 0 <= k < n_features for k in feats):
                raise FormatError(f"{path}:{lineno}: feature index outside [0, {n_features})")
            labels.append(labs)
            features.append(feats)
    if header is None:
        raise FormatError(f"{path}: missing 'L D' header")
    return MLCDataset(features, labels, header[0], header[1])


def write_mlc(path, data: MLCDataset) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"{data.n_labels} {data.n_features}\n")
        for feats, labs in zip(data.features, data.labels):
            label_field = ",".join(str(v) for v in sorted(labs))
            feat_field = " ".join(f"{k}:{v!r}" for k, v in sorted(feats.items()))
            fh.write((f"{label_field} {feat_field}".rstrip(" ") or " ") + "\n")


def make_mlc_synthetic(
    n_examples: int,
    n_labels: int = 12,
    n_features: int = 40,
    seed: int = 0,
    density: float = 0.2,
    noise: float = 0.5,
) -> MLCDataset:
    """Sparse binary features, labels from a noisy low-rank linear model with label co-occurrence."""
    rng = np.random.default_rng(seed)
    rank = max(2, n_labels // 3)
    topics = rng.normal(size=(n_features, rank))
    loadings = rng.normal(size=(rank, n_labels))
    bias = rng.normal(-1.5, 0.5, size=n_labels)
    features, labels = [], []
    for _ in range(n_examples):
        active = np.flatnonzero(rng.random(n_features) < density)
        x = np.zeros(n_features)
        x[active] = 1.0
        scores = (x @ topics) @ loadings / np.sqrt(max(1, len(active))) + bias
        scores += rng.normal(0.0, noise, size=n_labels)
        features.append({int(k): 1.0 for k in active})
        labels.append({int(k) for k in np.flatnonzero(scores > 0)})
    return MLCDataset(features, labels, n_labels, n_features)


# -- sequence data -----------------------------------------------------------
@dataclass
class SeqDataset:
    sentences: list[tuple[list[str], list[str]]]
    tags: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.tags:
            self.tags = sorted({t for _, tags in self.sentences for t in tags})
        for tokens, tags in self.sentences:
            if len(tokens) != len(tags):
                raise FormatError("token and tag lists differ in length")

    def __len__(self) -> int:
        return len(self.sentences)

    @property
    def tokens(self) -> list[list[str]]:
        return [list(s[0]) for s in self.sentences]

    @property
    def tag_sequences(self) -> list[list[str]]:
        return [list(s[1]) for s in self.sentences]


def read_conll(path, tags: Sequence[str] | None = None) -> SeqDataset:
    """Read ``token<TAB>tag`` lines with blank lines between sentences."""
    sentences = []
    tokens, labels = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip():
                if tokens:
                    sentences.append((tokens, labels))
                    tokens, labels = [], []
                continue
            fields = line.split("\t")
            if len(fields) != 2 or not fields[0] or not fields[1]:
                raise FormatError(f"{path}:{lineno}: expected 'token<TAB>tag', got {line!r}")
            tokens.append(fields[0])
            labels.append(fields[1])
    if tokens:
        sentences.append((tokens, labels))
    if tags is not None:
        known = set(tags)
        for tokens, labs in sentences:
            unknown = set(labs) - known
            if unknown:
                raise FormatError(f"{path}: tags {sorted(unknown)} not in the tag vocabulary")
        return SeqDataset(sentences, list(tags))
    return SeqDataset(sentences)


def write_conll(path, data: SeqDataset) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for k, (tokens, tags) in enumerate(data.sentences):
            if k:
                fh.write("\n")
            for tok, tag in zip(tokens, tags):
                fh.write(f"{tok}\t{tag}\n")


# -- tagging schemes -------------------------------------------------------------
def bio2_to_bioes(tags: Sequence[str], stats: dict | None = None) -> list[str]:
    """Convert BIO2 to BIOES.  An ``I-X`` that does not continue an ``X`` chunk is
    repaired to ``B-X`` (counted in ``stats['repaired']`` when given)."""
    fixed = []
    for i, tag in enumerate(tags):
        prefix, _, label = tag.partition("-")
        if prefix == "I":
            prev = fixed[i - 1] if i else "O"
            pp, _, pl = prev.partition("-")
            if pp not in ("B", "I") or pl != label:
                logger.warning("repairing ill-formed tag %s at position %d to B-%s", tag, i, label)
                if stats is not None:
                    stats["repaired"] = stats.get("repaired", 0) + 1
                tag = f"B-{label}"
        fixed.append(tag)
    out = []
    for i, tag in enumerate(fixed):
        prefix, _, label = tag.partition("-")
        nxt = fixed[i + 1] if i + 1 < len(fixed) else "O"
        continues = nxt == f"I-{label}"
        if prefix == "B":
            out.append(tag if continues else f"S-{label}")
        elif prefix == "I":
            out.append(tag if continues else f"E-{label}")
        else:
            out.append(tag)
    return out


def bioes_to_bio2(tags: Sequence[str]) -> list[str]:
    out = []
    for tag in tags:
        prefix, _, label = tag.partition("-")
        if prefix == "S":
            out.append(f"B-{label}")
        elif prefix == "E":
            out.append(f"I-{label}")
        else:
            out.append(tag)
    return out


# -- synthetic HMM corpora -------------------------------------------------------
@dataclass
class SyntheticHMMSpec:
    transitions: np.ndarray
    emissions: np.ndarray
    initial: np.ndarray
    seed: int = 0

    def __post_init__(self):
        self.transitions = np.asarray(self.transitions, dtype=float)
        self.emissions = np.asarray(self.emissions, dtype=float)
        self.initial = np.asarray(self.initial, dtype=float)
        for name, mat in (("transitions", self.transitions), ("emissions", self.emissions)):
            if np.any(mat < 0) or not np.allclose(mat.sum(axis=1), 1.0):
                raise ValueError(f"{name} rows must be probability distributions")
        if np.any(self.initial < 0) or not np.isclose(self.initial.sum(), 1.0):
            raise ValueError("initial distribution must be a probability distribution")

    @property
    def n_states(self) -> int:
        return self.transitions.shape[0]

    @property
    def n_symbols(self) -> int:
        return self.emissions.shape[1]

    @property
    def tag_names(self) -> list[str]:
        return [f"T{k}" for k in range(self.n_states)]

    @property
    def token_names(self) -> list[str]:
        return [f"w{k}" for k in range(self.n_symbols)]


def random_hmm_spec(
    n_states: int = 8,
    n_symbols: int = 50,
    seed: int = 0,
    transition_concentration: float = 0.1,
    symbols_per_state: int = 12,
    emission_concentration: float = 0.5,
) -> SyntheticHMMSpec:
    """A random HMM with peaked transitions and overlapping emission supports."""
    rng = np.random.default_rng(seed)
    transitions = rng.dirichlet(np.full(n_states, transition_concentration), size=n_states)
    emissions = np.zeros((n_states, n_symbols))
    for s in range(n_states):
        support = rng.choice(n_symbols, size=symbols_per_state, replace=False)
        emissions[s, support] = rng.dirichlet(np.full(symbols_per_state, emission_concentration))
    initial = rng.dirichlet(np.ones(n_states))
    return SyntheticHMMSpec(transitions, emissions, initial, seed)


def gen_hmm(spec: SyntheticHMMSpec, n_sequences: int, length_range: tuple[int, int] = (5, 20), seed: int | None = None) -> SeqDataset:
    """Sample sentences; gold tags are the hidden states."""
    rng = np.random.default_rng(spec.seed if seed is None else seed)
    lo, hi = length_range
    tags, words = spec.tag_names, spec.token_names
    trans_cdf = np.cumsum(spec.transitions, axis=1)
    emit_cdf = np.cumsum(spec.emissions, axis=1)
    init_cdf = np.cumsum(spec.initial)
    sentences = []
    for _ in range(n_sequences):
        n = int(rng.integers(lo, hi + 1))
        u = rng.random((n, 2))
        state = min(int(np.searchsorted(init_cdf, u[0, 0], side="right")), spec.n_states - 1)
        states = []
        for t in range(n):
            if t:
                state = min(int(np.searchsorted(trans_cdf[state], u[t, 0], side="right")), spec.n_states - 1)
            states.append(state)
        symbols = [min(int(np.searchsorted(emit_cdf[s], u[t, 1], side="right")), spec.n_symbols - 1) for t, s in enumerate(states)]
        sentences.append(([words[k] for k in symbols], [tags[k] for k in states]))
    return SeqDataset(sentences, list(tags))


def hmm_viterbi(spec: SyntheticHMMSpec, tokens: Sequence[str]) -> list[str]:
    """Decode with the true generating model (an upper-bound reference tagger)."""
    from .inference import viterbi

    index = {w: k for k, w in enumerate(spec.token_names)}
    with np.errstate(divide="ignore"):
        log_e = np.log(spec.emissions)
        log_t = np.log(spec.transitions)
        log_i = np.log(spec.initial)
    floor = -1e6
    unary = np.maximum(log_e[:, [index[w] for w in tokens]].T, floor)
    unary[0] += np.maximum(log_i, floor)
    path, _ = viterbi(unary, np.maximum(log_t, floor))
    return [spec.tag_names[k] for k in path]


def auto_tag(model, sentences: Sequence[Sequence[str]]) -> list[list[str]]:
    """Tag unlabeled token sequences with any fitted tagger exposing ``predict``."""
    tagged = model.predict([list(s) for s in sentences])
    for s, t in zip(sentences, tagged):
        if len(s) != len(t):
            raise ValueError("tagger returned a sequence of the wrong length")
    return [list(t) for t in tagged]


# -- batching ----------------------------------------------------------------
def batch_indices(lengths: Sequence[int] | int, batch_size: int, rng: np.random.Generator | None = None) -> list[np.ndarray]:
    """Split example indices into mini-batches.

    With an int, examples are fixed-size vectors and batches are contiguous
    slices of a (shuffled) permutation.  With a sequence of lengths, every
    batch holds sequences of a single length, so no padding is ever encoded.
    Without an rng the order is deterministic.
    """
    if isinstance(lengths, (int, np.integer)):
        order = rng.permutation(int(lengths)) if rng is not None else np.arange(int(lengths))
        return [order[k : k + batch_size] for k in range(0, len(order), batch_size)]
    lengths = np.asarray(lengths)
    batches = []
    for n in np.unique(lengths):
        idx = np.flatnonzero(lengths == n)
        if rng is not None:
            idx = rng.permutation(idx)
        batches.extend(idx[k : k + batch_size] for k in range(0, len(idx), batch_size))
    if rng is not None:
        batches = [batches[k] for k in rng.permutation(len(batches))]
    return batches
