"""Scikit-learn style estimators over the training routines.

Multi-label estimators take dense ``(n, D)`` feature arrays and ``(n, L)``
0/1 indicator matrices.  Taggers take lists of token lists and lists of
tag-string lists.  Every estimator can be written to and restored from a
model file with :func:`save_estimator` / :func:`load_estimator`.
"""

from __future__ import annotations

import json
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted

from . import autodiff as ad
from .energies import ChainEnergy, JointEnergy, MLCEnergy, TLMEnergy
from .inference import MLCInferenceNet, SeqInferenceNet, clone_module, decode_infnet, decode_viterbi
from .metrics import example_f1, token_accuracy
from .modelfile import load_model, save_model
from .nn import MLP, EmbeddingTable, TagLMCell, load_embeddings
from .training import (
    MetricsLog,
    StabilizerWeights,
    TrainPlan,
    crf_nll_train,
    distill,
    local_train,
    minimax_train,
    retune,
    tag_lm_perplexity,
    train_tag_lm,
    tune_threshold,
)


# -- validation helpers ----------------------------------------------------------
def check_multilabel(X, Y=None, n_features: int | None = None):
    """Validate dense features (and optionally a 0/1 label indicator matrix)."""
    X = check_array(X, dtype=np.float64)
    if n_features is not None and X.shape[1] != n_features:
        raise ValueError(f"X has {X.shape[1]} features, but the estimator was fitted with {n_features}")
    if Y is None:
        return X
    Y = check_array(Y, dtype=np.float64)
    if Y.shape[0] != X.shape[0]:
        raise ValueError(f"X has {X.shape[0]} rows but Y has {Y.shape[0]}")
    if not np.all((Y == 0) | (Y == 1)):
        raise ValueError("Y must be a 0/1 label indicator matrix")
    return X, Y


def check_sequences(X, y=None):
    """Validate token sequences (and optionally aligned tag sequences)."""
    if isinstance(X, (str, bytes)) or not hasattr(X, "__len__"):
        raise ValueError("X must be a list of token sequences")
    X = [list(s) for s in X]
    for k, s in enumerate(X):
        if len(s) == 0:
            raise ValueError(f"sequence {k} is empty")
    if y is None:
        return X
    y = [list(t) for t in y]
    if len(y) != len(X):
        raise ValueError(f"{len(X)} token sequences but {len(y)} tag sequences")
    for k, (s, t) in enumerate(zip(X, y)):
        if len(s) != len(t):
            raise ValueError(f"sequence {k}: {len(s)} tokens but {len(t)} tags")
    return X, y


def label_sets(Y) -> list[set[int]]:
    return [set(np.flatnonzero(row > 0.5).tolist()) for row in np.asarray(Y)]


def _log_or_none(log):
    return log if log is not None else None


# -- multi-label -----------------------------------------------------------------
class MLPMultiLabelClassifier(ClassifierMixin, BaseEstimator):
    """Independent-label MLP with a sigmoid head and a tuned decision threshold."""

    def __init__(self, hidden=(150, 150), lr=0.001, epochs=10, batch_size=32, tau=None, seed=0):
        self.hidden = hidden
        self.lr = lr
        self.epochs = epochs
        self.batch_size = batch_size
        self.tau = tau
        self.seed = seed

    def fit(self, X, Y, X_dev=None, Y_dev=None, log: MetricsLog | None = None):
        X, Y = check_multilabel(X, Y)
        rng = np.random.default_rng(self.seed)
        self.n_features_in_, self.n_labels_ = X.shape[1], Y.shape[1]
        self.net_ = MLP([self.n_features_in_, *self.hidden, self.n_labels_], rng, head="sigmoid")
        self.net_.relaxation = "box"
        self.net_.n_labels = self.n_labels_
        self.history_ = local_train(
            self.net_, X, Y, optimizer="adam", lr=self.lr, epochs=self.epochs,
            batch_size=self.batch_size, seed=self.seed, log=log,
        ).history
        self.tau_ = self._pick_tau(X, Y, X_dev, Y_dev)
        return self

    def _pick_tau(self, X, Y, X_dev, Y_dev) -> float:
        if self.tau is not None:
            return float(self.tau)
        if X_dev is not None:
            X, Y = check_multilabel(X_dev, Y_dev, self.n_features_in_)
        return tune_threshold(self.predict_proba(X), label_sets(Y))

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "net_")
        X = check_multilabel(X, n_features=self.n_features_in_)
        with ad.no_grad():
            return self.net_(X).data

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X) > self.tau_).astype(np.int64)

    def score(self, X, Y) -> float:
        """Example-averaged F1."""
        return example_f1(label_sets(self.predict(X)), label_sets(Y))

    def _export(self):
        arch = {"n_features": self.n_features_in_, "n_labels": self.n_labels_, "tau": self.tau_}
        return arch, {f"net.{k}": v for k, v in self.net_.state_dict().items()}

    def _import(self, arch, tensors):
        self.n_features_in_, self.n_labels_, self.tau_ = arch["n_features"], arch["n_labels"], arch["tau"]
        self.net_ = MLP([self.n_features_in_, *self.hidden, self.n_labels_], np.random.default_rng(0), head="sigmoid")
        self.net_.relaxation = "box"
        self.net_.n_labels = self.n_labels_
        self.net_.load_state_dict(_strip(tensors, "net."))


def _strip(tensors: dict[str, np.ndarray], prefix: str) -> dict[str, np.ndarray]:
    return {k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)}


class SPENMultiLabelClassifier(ClassifierMixin, BaseEstimator):
    """SPEN for multi-label classification trained jointly with an inference network.

    The feature network is pretrained as an independent-label MLP and frozen;
    the inference network starts from the same pretrained weights.  After
    training, a test-time copy is retuned to minimize energy on the
    development inputs and the decision threshold is tuned there.
    """

    def __init__(
        self,
        hidden=(150, 150),
        energy_hidden=16,
        hinge="contrastive",
        cost="l2",
        l2_phi=0.001,
        entropy=-1.0,
        anchor=1.0,
        l2_theta=0.001,
        phi_lr=0.001,
        theta_lr=0.001,
        batch_size=32,
        epochs=100,
        patience=10,
        pretrain_epochs=10,
        pretrain_lr=0.001,
        pretrained_init=True,
        retune_epochs=20,
        retune_lr=1e-5,
        tau=None,
        seed=0,
        debug=False,
    ):
        self.hidden = hidden
        self.energy_hidden = energy_hidden
        self.hinge = hinge
        self.cost = cost
        self.l2_phi = l2_phi
        self.entropy = entropy
        self.anchor = anchor
        self.l2_theta = l2_theta
        self.phi_lr = phi_lr
        self.theta_lr = theta_lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.patience = patience
        self.pretrain_epochs = pretrain_epochs
        self.pretrain_lr = pretrain_lr
        self.pretrained_init = pretrained_init
        self.retune_epochs = retune_epochs
        self.retune_lr = retune_lr
        self.tau = tau
        self.seed = seed
        self.debug = debug

    def _plan(self) -> TrainPlan:
        return TrainPlan(
            hinge=self.hinge,
            cost=self.cost,
            weights=StabilizerWeights(l2_phi=self.l2_phi, entropy=self.entropy, anchor=self.anchor, l2_theta=self.l2_theta),
            phi_optimizer="adam",
            phi_lr=self.phi_lr,
            theta_optimizer="adam",
            theta_lr=self.theta_lr,
            batch_size=self.batch_size,
            epochs=self.epochs,
            patience=self.patience,
            seed=self.seed,
            debug=self.debug,
        )

    def _build(self, n_features: int, n_labels: int, rng):
        widths = [n_features, *self.hidden, n_labels]
        self.feature_net_ = MLP(widths, rng, head="sigmoid")
        self.feature_net_.relaxation = "box"
        self.feature_net_.n_labels = n_labels
        self.energy_ = MLCEnergy(self.feature_net_, n_labels, rng, n_hidden=self.energy_hidden)
        self.infnet_ = MLCInferenceNet(n_features, self.hidden, n_labels, rng)

    def fit(self, X, Y, X_dev=None, Y_dev=None, X_unlabeled=None, log: MetricsLog | None = None):
        X, Y = check_multilabel(X, Y)
        if X_dev is None:
            X_dev, Y_dev = X, Y
        X_dev, Y_dev = check_multilabel(X_dev, Y_dev, X.shape[1])
        rng = np.random.default_rng(self.seed)
        self.n_features_in_, self.n_labels_ = X.shape[1], Y.shape[1]
        self._build(self.n_features_in_, self.n_labels_, rng)

        local_train(self.feature_net_, X, Y, optimizer="adam", lr=self.pretrain_lr,
                    epochs=self.pretrain_epochs, batch_size=self.batch_size, seed=self.seed)
        self.feature_net_.set_trainable(False)
        with ad.no_grad():
            self.mlp_dev_f1_ = _best_f1(self.feature_net_(X_dev).data, Y_dev)
        last_w, _ = self.feature_net_.layer(self.feature_net_.n_layers - 1)
        # start the local energy at minus the pretrained classifier's label weights
        self.energy_.label_vectors.data[...] = -last_w.data.T
        anchor = None
        if self.pretrained_init:
            self.infnet_.mlp.load_state_dict(self.feature_net_.state_dict())
            anchor = self.feature_net_

        def evaluate(net):
            with ad.no_grad():
                return _best_f1(net(X_dev).data, Y_dev)

        result = minimax_train(self._plan(), X, Y, self.energy_, self.infnet_, evaluate, anchor=anchor, log=log)
        self.history_ = result.history
        retune_X = X_dev if X_unlabeled is None else check_multilabel(X_unlabeled, n_features=self.n_features_in_)
        self.psi_, self.energy_before_retune_, self.energy_after_retune_ = retune(
            self.infnet_, self.energy_, retune_X, epochs=self.retune_epochs, lr=self.retune_lr,
            batch_size=self.batch_size, seed=self.seed, log=log,
        )
        self.tau_ = float(self.tau) if self.tau is not None else tune_threshold(self.predict_proba(X_dev), label_sets(Y_dev))
        return self

    def predict_proba(self, X, network: str = "psi") -> np.ndarray:
        check_is_fitted(self, "psi_")
        X = check_multilabel(X, n_features=self.n_features_in_)
        net = self.psi_ if network == "psi" else self.infnet_
        with ad.no_grad():
            return net(X).data

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X) > self.tau_).astype(np.int64)

    def score(self, X, Y) -> float:
        return example_f1(label_sets(self.predict(X)), label_sets(Y))

    def energy(self, X, Y) -> np.ndarray:
        """Energies of (relaxed or discrete) outputs ``Y`` for inputs ``X``."""
        check_is_fitted(self, "energy_")
        with ad.no_grad():
            return self.energy_.batch_energy(check_multilabel(X, n_features=self.n_features_in_), np.asarray(Y, float)).data

    def _export(self):
        arch = {"n_features": self.n_features_in_, "n_labels": self.n_labels_, "tau": self.tau_}
        tensors = {f"energy.{k}": v for k, v in self.energy_.state_dict().items()}
        tensors.update({f"features.{k}": v for k, v in self.feature_net_.state_dict().items()})
        tensors.update({f"phi.{k}": v for k, v in self.infnet_.state_dict().items()})
        tensors.update({f"psi.{k}": v for k, v in self.psi_.state_dict().items()})
        return arch, tensors

    def _import(self, arch, tensors):
        self.n_features_in_, self.n_labels_, self.tau_ = arch["n_features"], arch["n_labels"], arch["tau"]
        self._build(self.n_features_in_, self.n_labels_, np.random.default_rng(0))
        self.feature_net_.load_state_dict(_strip(tensors, "features."))
        self.feature_net_.set_trainable(False)
        energy_state = {k: v for k, v in _strip(tensors, "energy.").items() if not k.startswith("feature_net.")}
        for name, value in energy_state.items():
            getattr(self.energy_, name).data[...] = value
        self.infnet_.load_state_dict(_strip(tensors, "phi."))
        self.psi_ = MLCInferenceNet(self.n_features_in_, self.hidden, self.n_labels_, np.random.default_rng(0))
        self.psi_.load_state_dict(_strip(tensors, "psi."))


def _best_f1(probs: np.ndarray, Y: np.ndarray) -> float:
    sets = label_sets(Y)
    tau = tune_threshold(probs, sets)
    return example_f1([set(np.flatnonzero(r > tau).tolist()) for r in probs], sets)


# -- sequence labeling -----------------------------------------------------------
class _TaggerBase(ClassifierMixin, BaseEstimator):
    """Shared vocabulary, embedding and tag handling for taggers."""

    def _setup(self, X, y, rng, tags=None):
        if self.embeddings is None:
            vocab = sorted({tok for s in X for tok in s})
            self.table_ = EmbeddingTable.random(vocab, self.embedding_dim, rng)
        elif isinstance(self.embeddings, EmbeddingTable):
            self.table_ = self.embeddings
        else:
            self.table_ = load_embeddings(self.embeddings, self.embedding_dim)
        tags = tags or getattr(self, "tags", None)
        if tags:
            self.tags_ = list(tags)
        else:
            self.tags_ = sorted({t for s in y for t in s})
        self.tag_index_ = {t: k for k, t in enumerate(self.tags_)}

    def _ids(self, X) -> list[np.ndarray]:
        return [self.table_.lookup(s) for s in check_sequences(X)]

    def _labels(self, y) -> list[np.ndarray]:
        out = []
        for k, tags in enumerate(y):
            unknown = [t for t in tags if t not in self.tag_index_]
            if unknown:
                raise ValueError(f"sequence {k}: unknown tags {sorted(set(unknown))}")
            out.append(np.array([self.tag_index_[t] for t in tags], dtype=np.int64))
        return out

    def _names(self, paths) -> list[list[str]]:
        return [[self.tags_[k] for k in p] for p in paths]

    def _accuracy_fn(self, X_dev, y_dev, decode):
        if X_dev is None:
            return None
        X_dev, y_dev = check_sequences(X_dev, y_dev)
        ids, gold = self._ids(X_dev), [list(g) for g in self._labels(y_dev)]
        return lambda: token_accuracy(decode(ids), gold)

    def score(self, X, y) -> float:
        """Token accuracy."""
        X, y = check_sequences(X, y)
        return token_accuracy(self.predict(X), y)

    def _table_export(self):
        vocab = [tok for tok, _ in sorted(self.table_.vocab.items(), key=lambda kv: kv[1])]
        return {"vocabulary": vocab, "tags": self.tags_}, {"embeddings": self.table_.matrix}

    def _table_import(self, arch, tensors):
        self.table_ = EmbeddingTable({tok: i for i, tok in enumerate(arch["vocabulary"])}, tensors["embeddings"])
        self.tags_ = list(arch["tags"])
        self.tag_index_ = {t: k for k, t in enumerate(self.tags_)}


class CRFTagger(_TaggerBase):
    """Linear-chain CRF over BLSTM features, trained by conditional log-likelihood."""

    def __init__(self, hidden_dim=100, embedding_dim=50, embeddings=None, tags=None, optimizer="sgd",
                 lr=0.05, momentum=0.9, l2=0.0, epochs=30, patience=10, batch_size=32, seed=0):
        self.hidden_dim = hidden_dim
        self.embedding_dim = embedding_dim
        self.embeddings = embeddings
        self.tags = tags
        self.optimizer = optimizer
        self.lr = lr
        self.momentum = momentum
        self.l2 = l2
        self.epochs = epochs
        self.patience = patience
        self.batch_size = batch_size
        self.seed = seed

    def fit(self, X, y, X_dev=None, y_dev=None, log: MetricsLog | None = None):
        X, y = check_sequences(X, y)
        rng = np.random.default_rng(self.seed)
        self._setup(X, y, rng)
        self.energy_ = ChainEnergy(self.table_, self.hidden_dim, len(self.tags_), rng)
        evaluate = self._accuracy_fn(X_dev, y_dev, lambda ids: decode_viterbi(self.energy_, ids, self.batch_size))
        self.history_ = crf_nll_train(
            self.energy_, self._ids(X), self._labels(y), evaluate, optimizer=self.optimizer, lr=self.lr,
            momentum=self.momentum, l2=self.l2, epochs=self.epochs, patience=self.patience,
            batch_size=self.batch_size, seed=self.seed, log=log,
        ).history
        return self

    def predict(self, X, batch_size: int | None = None) -> list[list[str]]:
        check_is_fitted(self, "energy_")
        return self._names(decode_viterbi(self.energy_, self._ids(X), batch_size or self.batch_size))

    def pairwise(self) -> np.ndarray:
        check_is_fitted(self, "energy_")
        return self.energy_.transitions.data.copy()

    def _export(self):
        arch, tensors = self._table_export()
        tensors.update({f"energy.{k}": v for k, v in self.energy_.state_dict().items()})
        return arch, tensors

    def _import(self, arch, tensors):
        self._table_import(arch, tensors)
        self.energy_ = ChainEnergy(self.table_, self.hidden_dim, len(self.tags_), np.random.default_rng(0))
        self.energy_.load_state_dict(_strip(tensors, "energy."))


class BLSTMTagger(_TaggerBase):
    """BLSTM with a per-position softmax, trained with per-token log loss."""

    def __init__(self, hidden_dim=100, embedding_dim=50, embeddings=None, tags=None, optimizer="adam",
                 lr=0.001, momentum=0.9, epochs=30, patience=10, batch_size=32, seed=0):
        self.hidden_dim = hidden_dim
        self.embedding_dim = embedding_dim
        self.embeddings = embeddings
        self.tags = tags
        self.optimizer = optimizer
        self.lr = lr
        self.momentum = momentum
        self.epochs = epochs
        self.patience = patience
        self.batch_size = batch_size
        self.seed = seed

    def fit(self, X, y, X_dev=None, y_dev=None, log: MetricsLog | None = None):
        X, y = check_sequences(X, y)
        rng = np.random.default_rng(self.seed)
        self._setup(X, y, rng)
        self.net_ = SeqInferenceNet(self.table_, self.hidden_dim, len(self.tags_), rng)
        evaluate = self._accuracy_fn(X_dev, y_dev, lambda ids: decode_infnet(self.net_, ids, self.batch_size))
        self.history_ = local_train(
            self.net_, self._ids(X), self._labels(y), evaluate, optimizer=self.optimizer, lr=self.lr,
            momentum=self.momentum, epochs=self.epochs, patience=self.patience,
            batch_size=self.batch_size, seed=self.seed, log=log,
        ).history
        return self

    def predict_proba(self, X) -> list[np.ndarray]:
        check_is_fitted(self, "net_")
        with ad.no_grad():
            return [self.net_(ids[None]).data[0] for ids in self._ids(X)]

    def predict(self, X, batch_size: int | None = None) -> list[list[str]]:
        check_is_fitted(self, "net_")
        return self._names(decode_infnet(self.net_, self._ids(X), batch_size or self.batch_size))

    def _export(self):
        arch, tensors = self._table_export()
        tensors.update({f"net.{k}": v for k, v in self.net_.state_dict().items()})
        return arch, tensors

    def _import(self, arch, tensors):
        self._table_import(arch, tensors)
        self.net_ = SeqInferenceNet(self.table_, self.hidden_dim, len(self.tags_), np.random.default_rng(0))
        self.net_.load_state_dict(_strip(tensors, "net."))


class TagLanguageModel(BaseEstimator):
    """LSTM language model over tag sequences, used as a frozen global energy term."""

    def __init__(self, hidden_dim=50, n_layers=1, dropout=0.5, lr=0.5, momentum=0.9, epochs=20,
                 patience=3, batch_size=32, clip=5.0, tags=None, seed=0):
        self.hidden_dim = hidden_dim
        self.n_layers = n_layers
        self.dropout = dropout
        self.lr = lr
        self.momentum = momentum
        self.epochs = epochs
        self.patience = patience
        self.batch_size = batch_size
        self.clip = clip
        self.tags = tags
        self.seed = seed

    def fit(self, sequences, dev_sequences=None, log: MetricsLog | None = None):
        sequences = [list(s) for s in sequences]
        if not sequences:
            raise ValueError("cannot train a tag language model on an empty corpus")
        self.tags_ = list(self.tags) if self.tags else sorted({t for s in sequences for t in s})
        self.tag_index_ = {t: k for k, t in enumerate(self.tags_)}
        dev = [self._encode(s) for s in dev_sequences] if dev_sequences else []
        self.cell_, self.perplexity_, result = train_tag_lm(
            [self._encode(s) for s in sequences], dev, len(self.tags_), hidden_dim=self.hidden_dim,
            n_layers=self.n_layers, dropout=self.dropout, lr=self.lr, momentum=self.momentum,
            epochs=self.epochs, patience=self.patience, batch_size=self.batch_size, clip=self.clip,
            seed=self.seed, log=log,
        )
        self.history_ = result.history
        return self

    def _encode(self, seq) -> np.ndarray:
        unknown = [t for t in seq if t not in self.tag_index_]
        if unknown:
            raise ValueError(f"unknown tags {sorted(set(unknown))}")
        return np.array([self.tag_index_[t] for t in seq], dtype=np.int64)

    def perplexity(self, sequences) -> float:
        check_is_fitted(self, "cell_")
        return tag_lm_perplexity(self.cell_, [self._encode(s) for s in sequences])

    def nll(self, sequence) -> float:
        check_is_fitted(self, "cell_")
        return self.cell_.sequence_nll(self._encode(sequence).tolist())

    def score(self, sequences) -> float:
        return -self.perplexity(sequences)

    def energy(self) -> TLMEnergy:
        check_is_fitted(self, "cell_")
        return TLMEnergy(self.cell_)

    def _export(self):
        arch = {"tags": self.tags_, "perplexity": self.perplexity_}
        return arch, {f"cell.{k}": v for k, v in self.cell_.state_dict().items()}

    def _import(self, arch, tensors):
        self.tags_ = list(arch["tags"])
        self.tag_index_ = {t: k for k, t in enumerate(self.tags_)}
        self.perplexity_ = arch["perplexity"]
        self.cell_ = TagLMCell(len(self.tags_), self.hidden_dim, np.random.default_rng(0), self.n_layers, self.dropout)
        self.cell_.load_state_dict(_strip(tensors, "cell."))
        self.cell_.train(False)
        self.cell_.set_trainable(False)


def _chain_with_tlm(chain: ChainEnergy, tlm: TagLanguageModel | None, weight: float, tags: Sequence[str]):
    if tlm is None or weight == 0.0:
        return chain
    if list(tlm.tags_) != list(tags):
        raise ValueError("tag language model and tagger use different tag sets")
    return JointEnergy(chain, TLMEnergy(tlm.cell_), weight)


class SPENTagger(_TaggerBase):
    """Chain (optionally +TLM) SPEN trained jointly with a BLSTM inference network."""

    def __init__(
        self,
        hidden_dim=100,
        embedding_dim=50,
        embeddings=None,
        tags=None,
        hinge="margin-rescaled",
        cost="l1",
        normalize_cost=False,
        l2_phi=0.0,
        entropy=0.0,
        cross_entropy=1.0,
        anchor=0.0,
        l2_theta=0.0,
        phi_optimizer="sgd",
        phi_lr=0.01,
        phi_momentum=0.9,
        theta_optimizer="adam",
        theta_lr=0.001,
        batch_size=32,
        epochs=100,
        patience=10,
        pretrained_init=False,
        pretrain_epochs=10,
        retune_epochs=0,
        retune_lr=1e-5,
        tlm=None,
        tlm_weight=0.0,
        seed=0,
        debug=False,
    ):
        self.hidden_dim = hidden_dim
        self.embedding_dim = embedding_dim
        self.embeddings = embeddings
        self.tags = tags
        self.hinge = hinge
        self.cost = cost
        self.normalize_cost = normalize_cost
        self.l2_phi = l2_phi
        self.entropy = entropy
        self.cross_entropy = cross_entropy
        self.anchor = anchor
        self.l2_theta = l2_theta
        self.phi_optimizer = phi_optimizer
        self.phi_lr = phi_lr
        self.phi_momentum = phi_momentum
        self.theta_optimizer = theta_optimizer
        self.theta_lr = theta_lr
        self.batch_size = batch_size
        self.epochs = epochs
        self.patience = patience
        self.pretrained_init = pretrained_init
        self.pretrain_epochs = pretrain_epochs
        self.retune_epochs = retune_epochs
        self.retune_lr = retune_lr
        self.tlm = tlm
        self.tlm_weight = tlm_weight
        self.seed = seed
        self.debug = debug

    def _plan(self) -> TrainPlan:
        return TrainPlan(
            hinge=self.hinge,
            cost=self.cost,
            normalize_cost=self.normalize_cost,
            weights=StabilizerWeights(self.l2_phi, self.entropy, self.cross_entropy, self.anchor, self.l2_theta),
            phi_optimizer=self.phi_optimizer,
            phi_lr=self.phi_lr,
            phi_momentum=self.phi_momentum,
            theta_optimizer=self.theta_optimizer,
            theta_lr=self.theta_lr,
            batch_size=self.batch_size,
            epochs=self.epochs,
            patience=self.patience,
            seed=self.seed,
            debug=self.debug,
        )

    def fit(self, X, y, X_dev=None, y_dev=None, X_unlabeled=None, log: MetricsLog | None = None):
        X, y = check_sequences(X, y)
        rng = np.random.default_rng(self.seed)
        self._setup(X, y, rng, self.tlm.tags_ if self.tlm is not None and not self.tags else None)
        L = len(self.tags_)
        self.chain_ = ChainEnergy(self.table_, self.hidden_dim, L, rng)
        self.energy_ = _chain_with_tlm(self.chain_, self.tlm, self.tlm_weight, self.tags_)
        self.infnet_ = SeqInferenceNet(self.table_, self.hidden_dim, L, rng)
        ids, labels = self._ids(X), self._labels(y)
        anchor = None
        if self.pretrained_init or self.anchor:
            local_train(self.infnet_, ids, labels, epochs=self.pretrain_epochs, batch_size=self.batch_size, seed=self.seed)
            anchor = clone_module(self.infnet_)
            if not self.pretrained_init:
                self.infnet_ = SeqInferenceNet(self.table_, self.hidden_dim, L, rng)
        evaluate_fn = self._accuracy_fn(X_dev, y_dev, lambda ids_: decode_infnet(self._current, ids_, self.batch_size))
        self._current = self.infnet_
        evaluate = (lambda net: evaluate_fn()) if evaluate_fn is not None else None
        result = minimax_train(self._plan(), ids, labels, self.energy_, self.infnet_, evaluate, anchor=anchor, log=log)
        self.history_ = result.history
        retune_X = X_unlabeled if X_unlabeled is not None else X_dev
        if retune_X is not None and self.retune_epochs > 0:
            self.psi_, self.energy_before_retune_, self.energy_after_retune_ = retune(
                self.infnet_, self.energy_, self._ids(retune_X), epochs=self.retune_epochs, lr=self.retune_lr,
                batch_size=self.batch_size, seed=self.seed, log=log,
            )
        else:
            self.psi_ = self.infnet_
        del self._current
        return self

    def predict(self, X, method: str = "infnet", batch_size: int | None = None) -> list[list[str]]:
        check_is_fitted(self, "psi_")
        ids = self._ids(X)
        if method == "viterbi":
            if isinstance(self.energy_, JointEnergy):
                raise ValueError("exact decoding is unavailable for energies with a tag language model term")
            return self._names(decode_viterbi(self.energy_, ids, batch_size or self.batch_size))
        return self._names(decode_infnet(self.psi_, ids, batch_size or self.batch_size))

    def _export(self):
        arch, tensors = self._table_export()
        tensors.update({f"energy.{k}": v for k, v in self.chain_.state_dict().items()})
        tensors.update({f"phi.{k}": v for k, v in self.infnet_.state_dict().items()})
        tensors.update({f"psi.{k}": v for k, v in self.psi_.state_dict().items()})
        if isinstance(self.energy_, JointEnergy):
            tlm_arch, tlm_tensors = self.tlm._export()
            arch["tlm"] = {"params": _jsonable_params(self.tlm), **tlm_arch}
            tensors.update({f"tlm.{k}": v for k, v in tlm_tensors.items()})
        return arch, tensors

    def _import(self, arch, tensors):
        self._table_import(arch, tensors)
        L = len(self.tags_)
        rng = np.random.default_rng(0)
        self.chain_ = ChainEnergy(self.table_, self.hidden_dim, L, rng)
        self.chain_.load_state_dict(_strip(tensors, "energy."))
        self.infnet_ = SeqInferenceNet(self.table_, self.hidden_dim, L, rng)
        self.infnet_.load_state_dict(_strip(tensors, "phi."))
        self.psi_ = SeqInferenceNet(self.table_, self.hidden_dim, L, rng)
        self.psi_.load_state_dict(_strip(tensors, "psi."))
        self.energy_ = self.chain_
        if "tlm" in arch:
            tlm = TagLanguageModel(**arch["tlm"]["params"])
            tlm._import(arch["tlm"], _strip(tensors, "tlm."))
            self.tlm = tlm
            self.energy_ = _chain_with_tlm(self.chain_, tlm, self.tlm_weight, self.tags_)


class InferenceNetworkTagger(_TaggerBase):
    """Inference network trained to minimize a fixed, pretrained chain energy.

    ``energy_model`` is a fitted :class:`CRFTagger` (or :class:`SPENTagger`);
    its energy (optionally plus ``tlm_weight`` times a tag-LM energy) stays
    frozen.  The ``l2`` stabilizer pulls toward a locally pretrained BLSTM,
    which also initializes the network in that case.
    """

    def __init__(self, energy_model=None, stabilizer="cross-entropy", weight=1.0, hidden_dim=None,
                 optimizer="adam", lr=0.005, momentum=0.9, epochs=20, patience=5, pretrain_epochs=10,
                 batch_size=32, tlm=None, tlm_weight=0.0, seed=0):
        self.energy_model = energy_model
        self.stabilizer = stabilizer
        self.weight = weight
        self.hidden_dim = hidden_dim
        self.optimizer = optimizer
        self.lr = lr
        self.momentum = momentum
        self.epochs = epochs
        self.patience = patience
        self.pretrain_epochs = pretrain_epochs
        self.batch_size = batch_size
        self.tlm = tlm
        self.tlm_weight = tlm_weight
        self.seed = seed

    def fit(self, X, y, X_dev=None, y_dev=None, log: MetricsLog | None = None):
        X, y = check_sequences(X, y)
        source = self.energy_model
        if source is None:
            raise ValueError("an inference network needs a fitted energy model to distill")
        check_is_fitted(source, "energy_")
        self.table_, self.tags_, self.tag_index_ = source.table_, list(source.tags_), dict(source.tag_index_)
        self.chain_ = getattr(source, "chain_", source.energy_)
        self.energy_ = _chain_with_tlm(self.chain_, self.tlm, self.tlm_weight, self.tags_)
        self.energy_hash_ = self.chain_.param_hash()
        rng = np.random.default_rng(self.seed)
        hidden = self.hidden_dim or self.chain_.encoder.hidden_dim
        self.net_ = SeqInferenceNet(self.table_, hidden, len(self.tags_), rng)
        ids, labels = self._ids(X), self._labels(y)
        anchor = None
        if self.stabilizer == "l2":
            local_train(self.net_, ids, labels, epochs=self.pretrain_epochs, batch_size=self.batch_size, seed=self.seed)
            anchor = clone_module(self.net_)
        evaluate = self._accuracy_fn(X_dev, y_dev, lambda ids_: decode_infnet(self.net_, ids_, self.batch_size))
        self.history_ = distill(
            self.energy_, self.net_, ids, labels, stabilizer=self.stabilizer, weight=self.weight,
            evaluate=evaluate, anchor=anchor, optimizer=self.optimizer, lr=self.lr, momentum=self.momentum,
            epochs=self.epochs, patience=self.patience, batch_size=self.batch_size, seed=self.seed, log=log,
        ).history
        if self.chain_.param_hash() != self.energy_hash_:
            raise AssertionError("energy parameters changed during inference-network training")
        return self

    def predict(self, X, method: str = "infnet", batch_size: int | None = None) -> list[list[str]]:
        check_is_fitted(self, "net_")
        ids = self._ids(X)
        if method == "viterbi":
            return self._names(decode_viterbi(self.chain_, ids, batch_size or self.batch_size))
        return self._names(decode_infnet(self.net_, ids, batch_size or self.batch_size))

    def _export(self):
        arch, tensors = self._table_export()
        arch["net_hidden"] = self.net_.encoder.hidden_dim
        arch["energy_hidden"] = self.chain_.encoder.hidden_dim
        tensors.update({f"energy.{k}": v for k, v in self.chain_.state_dict().items()})
        tensors.update({f"net.{k}": v for k, v in self.net_.state_dict().items()})
        if self.tlm is not None and self.tlm_weight:
            tlm_arch, tlm_tensors = self.tlm._export()
            arch["tlm"] = {"params": _jsonable_params(self.tlm), **tlm_arch}
            tensors.update({f"tlm.{k}": v for k, v in tlm_tensors.items()})
        return arch, tensors

    def _import(self, arch, tensors):
        self._table_import(arch, tensors)
        rng = np.random.default_rng(0)
        self.chain_ = ChainEnergy(self.table_, arch["energy_hidden"], len(self.tags_), rng)
        self.chain_.load_state_dict(_strip(tensors, "energy."))
        self.net_ = SeqInferenceNet(self.table_, arch["net_hidden"], len(self.tags_), rng)
        self.net_.load_state_dict(_strip(tensors, "net."))
        self.energy_ = self.chain_
        self.energy_hash_ = self.chain_.param_hash()
        if "tlm" in arch:
            tlm = TagLanguageModel(**arch["tlm"]["params"])
            tlm._import(arch["tlm"], _strip(tensors, "tlm."))
            self.tlm = tlm
            self.energy_ = _chain_with_tlm(self.chain_, tlm, self.tlm_weight, self.tags_)


# -- persistence -----------------------------------------------------------------
ESTIMATORS = {
    cls.__name__: cls
    for cls in (MLPMultiLabelClassifier, SPENMultiLabelClassifier, CRFTagger, BLSTMTagger,
                TagLanguageModel, SPENTagger, InferenceNetworkTagger)
}
_NOT_SERIALIZED = ("embeddings", "energy_model", "tlm")


def _jsonable_params(est) -> dict:
    params = {k: v for k, v in est.get_params(deep=False).items() if k not in _NOT_SERIALIZED}
    return json.loads(json.dumps(params, default=lambda v: list(v) if isinstance(v, tuple) else str(v)))


def save_estimator(path, est, **extra) -> None:
    """Write a fitted estimator; ``extra`` entries (e.g. the run seed) go into the manifest."""
    arch, tensors = est._export()
    manifest = {"estimator": type(est).__name__, "params": _jsonable_params(est), "architecture": arch, **extra}
    save_model(path, manifest, tensors)


def load_estimator(path):
    manifest, tensors = load_model(path)
    name = manifest.get("estimator")
    if name not in ESTIMATORS:
        raise ValueError(f"{path}: unknown estimator {name!r}")
    params = dict(manifest["params"])
    if "hidden" in params and isinstance(params["hidden"], list):
        params["hidden"] = tuple(params["hidden"])
    est = ESTIMATORS[name](**params)
    est._import(manifest["architecture"], tensors)
    est.manifest_ = manifest
    return est
