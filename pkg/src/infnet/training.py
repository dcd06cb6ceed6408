"""Losses, the alternating minimax trainer, retuning, and baseline/auxiliary trainers."""

from __future__ import annotations

import contextlib
import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import NumericError, ShapeError, Tensor
from .data import batch_indices
from .energies import one_hot
from .inference import chain_path_score, clone_module, crf_log_partition
from .metrics import example_f1
from .nn import Module, TagLMCell, l2_distance_sq, l2_norm_sq
from .optim import make_optimizer

logger = logging.getLogger(__name__)

HINGES = ("margin-rescaled", "slack-rescaled", "perceptron", "contrastive")
COSTS = ("l2", "l1", "zero", "one")
STABILIZERS = ("cross-entropy", "entropy", "l2", "none")
TAU_GRID = (0.0, 0.01, 0.02, 0.03, 0.04, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3, 0.35, 0.4, 0.45, 0.5, 0.55, 0.6, 0.65, 0.7, 0.75)
LOG_FLOOR = 1e-12


@dataclass
class StabilizerWeights:
    l2_phi: float = 0.0
    entropy: float = 0.0
    cross_entropy: float = 0.0
    anchor: float = 0.0
    l2_theta: float = 0.0

    def __post_init__(self):
        for name in ("l2_phi", "cross_entropy", "anchor", "l2_theta"):
            if getattr(self, name) < 0:
                raise ValueError(f"stabilizer weight {name} must be nonnegative")


@dataclass
class TrainPlan:
    hinge: str = "margin-rescaled"
    cost: str = "l2"
    normalize_cost: bool = False
    weights: StabilizerWeights = field(default_factory=StabilizerWeights)
    phi_optimizer: str = "adam"
    phi_lr: float = 0.001
    phi_momentum: float = 0.9
    theta_optimizer: str = "adam"
    theta_lr: float = 0.001
    batch_size: int = 32
    epochs: int = 100
    patience: int = 10
    seed: int = 0
    debug: bool = False

    def __post_init__(self):
        if self.hinge not in HINGES:
            raise ValueError(f"unknown hinge {self.hinge!r}; expected one of {HINGES}")
        if self.cost not in COSTS:
            raise ValueError(f"unknown cost {self.cost!r}; expected one of {COSTS}")


class MetricsLog:
    """``epoch<TAB>split<TAB>metric<TAB>value`` lines, flushed at every epoch end."""

    def __init__(self, stream=None):
        self.stream = stream
        self.lines: list[str] = []

    def __call__(self, epoch: int, split: str, metric: str, value: float) -> None:
        line = f"{epoch}\t{split}\t{metric}\t{value:.6f}\n"
        self.lines.append(line)
        if self.stream is not None:
            self.stream.write(line)

    def flush(self) -> None:
        if self.stream is not None:
            self.stream.flush()


@contextlib.contextmanager
def frozen(params: Iterable[Tensor]):
    """Temporarily exclude ``params`` from gradient computation."""
    params = list(params)
    saved = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, flag in zip(params, saved):
            p.requires_grad = flag


# -- data plumbing -----------------------------------------------------------
@dataclass
class Batch:
    x: np.ndarray
    gold: np.ndarray
    labels: np.ndarray | None = None


def make_batches(X, Y, n_labels: int, batch_size: int, rng=None) -> list[Batch]:
    """Mini-batches for dense MLC arrays or lists of token-id / label-id sequences."""
    if isinstance(X, np.ndarray) and X.ndim == 2 and isinstance(Y, np.ndarray) and Y.ndim == 2 and Y.shape[1] == n_labels:
        return [Batch(X[idx], Y[idx]) for idx in batch_indices(len(X), batch_size, rng)]
    batches = []
    for idx in batch_indices([len(s) for s in X], batch_size, rng):
        ids = np.stack([X[i] for i in idx])
        labels = np.stack([Y[i] for i in idx]) if Y is not None else None
        gold = one_hot(labels, n_labels) if labels is not None else None
        batches.append(Batch(ids, gold, labels))
    return batches


# -- costs, hinges, regularizers ----------------------------------------------
def _reduce_example(t: Tensor) -> Tensor:
    axes = tuple(range(1, t.ndim))
    return ad.tsum(t, axis=axes) if axes else t


def batch_cost(kind: str, y_pred, gold, normalize: bool = False) -> Tensor:
    """Per-example cost between relaxed predictions and one-hot / 0-1 gold, shape (B,)."""
    y_pred = ad.as_tensor(y_pred)
    gold = np.asarray(gold, dtype=float)
    if y_pred.shape != gold.shape:
        raise ShapeError(f"cost: prediction shape {y_pred.shape} != gold shape {gold.shape}")
    B = y_pred.shape[0]
    if kind == "zero":
        return ad.Tensor(np.zeros(B))
    if kind == "one":
        return ad.Tensor(np.ones(B))
    diff = y_pred - gold
    if kind == "l2":
        out = _reduce_example(diff * diff)
    elif kind == "l1":
        out = _reduce_example(ad.absolute(diff))
    else:
        raise ValueError(f"unknown cost {kind!r}")
    if normalize and y_pred.ndim == 3:
        out = out * (1.0 / y_pred.shape[1])
    return out


def cost(kind: str, y_pred, y_gold) -> float:
    """Cost of one relaxed output against a discrete labeling (label set or tag list)."""
    y_pred = np.asarray(y_pred, dtype=float)
    L = y_pred.shape[-1]
    if y_pred.ndim == 1:
        gold = np.zeros(L)
        gold[sorted(y_gold)] = 1.0
    else:
        if len(y_gold) != y_pred.shape[0]:
            raise ShapeError(f"cost: {y_pred.shape[0]} positions but {len(y_gold)} gold tags")
        gold = one_hot(list(y_gold), L)
    with ad.no_grad():
        return batch_cost(kind, y_pred[None], gold[None]).item()


def hinge(kind: str, delta, e_pred, e_gold) -> Tensor:
    """Structured hinge given cost ``delta`` and energies of the prediction and the gold output."""
    delta, e_pred, e_gold = ad.as_tensor(delta), ad.as_tensor(e_pred), ad.as_tensor(e_gold)
    if kind == "margin-rescaled":
        return ad.relu(delta - e_pred + e_gold)
    if kind == "slack-rescaled":
        return delta * ad.relu(1.0 - e_pred + e_gold)
    if kind == "perceptron":
        return ad.relu(e_gold - e_pred)
    if kind == "contrastive":
        return ad.relu(1.0 - e_pred + e_gold)
    raise ValueError(f"unknown hinge {kind!r}")


def entropy(y, relaxation: str) -> Tensor:
    """Per-example entropy: sum of Bernoulli entropies (box) or of per-position entropies (simplex)."""
    y = ad.as_tensor(y)
    if relaxation == "box":
        h = -(ad.xlogx(y) + ad.xlogx(1.0 - y))
    else:
        h = -ad.xlogx(y)
    return _reduce_example(h)


def local_cross_entropy(y, gold, relaxation: str) -> Tensor:
    y = ad.as_tensor(y)
    gold = np.asarray(gold, dtype=float)
    if relaxation == "box":
        ce = -(gold * ad.log(ad.clamp_min(y, LOG_FLOOR)) + (1.0 - gold) * ad.log(ad.clamp_min(1.0 - y, LOG_FLOOR)))
    else:
        ce = -(gold * ad.log(ad.clamp_min(y, LOG_FLOOR)))
    return _reduce_example(ce)


def _energy_module_params(energy) -> list[Tensor]:
    return [p for p in energy.theta_parameters()]


def phi_objective(batch: Batch, energy, infnet: Module, plan: TrainPlan, anchor: Sequence[np.ndarray] | None = None) -> Tensor:
    """Objective the cost-augmented inference network maximizes (energy held fixed)."""
    w = plan.weights
    theta = _energy_module_params(energy)
    with frozen(theta):
        y = infnet(batch.x)
        delta = batch_cost(plan.cost, y, batch.gold, plan.normalize_cost)
        e_pred = energy.batch_energy(batch.x, y)
        e_gold = energy.batch_energy(batch.x, batch.gold)
        obj = ad.mean(hinge(plan.hinge, delta, e_pred, e_gold))
        if w.l2_phi:
            obj = obj - w.l2_phi * l2_norm_sq(infnet.parameters())
        if w.entropy:
            obj = obj + w.entropy * ad.mean(entropy(y, infnet.relaxation))
        if w.cross_entropy:
            obj = obj - w.cross_entropy * ad.mean(local_cross_entropy(y, batch.gold, infnet.relaxation))
        if w.anchor and anchor is not None:
            obj = obj - w.anchor * l2_distance_sq(infnet.parameters(), anchor)
    return obj


def theta_objective(batch: Batch, energy, infnet: Module, plan: TrainPlan) -> Tensor:
    """Objective the energy minimizes with the inference network held fixed."""
    with frozen(infnet.parameters()), ad.no_grad():
        y = infnet(batch.x).data
    delta = batch_cost(plan.cost, y, batch.gold, plan.normalize_cost)
    e_pred = energy.batch_energy(batch.x, y)
    e_gold = energy.batch_energy(batch.x, batch.gold)
    obj = ad.mean(hinge(plan.hinge, delta, e_pred, e_gold))
    if plan.weights.l2_theta:
        obj = obj + plan.weights.l2_theta * l2_norm_sq(_energy_module_params(energy))
    return obj


def mean_hinge(energy, infnet, batches: Sequence[Batch], plan: TrainPlan) -> float:
    total = count = 0.0
    with ad.no_grad():
        for b in batches:
            y = infnet(b.x)
            h = hinge(plan.hinge, batch_cost(plan.cost, y, b.gold, plan.normalize_cost),
                      energy.batch_energy(b.x, y), energy.batch_energy(b.x, b.gold))
            total += h.data.sum()
            count += len(h.data)
    return total / max(count, 1)


def _finite_or_abort(value: Tensor, where: str) -> None:
    if not np.all(np.isfinite(value.data)):
        raise NumericError(f"non-finite loss at {where}")


# -- minimax training ----------------------------------------------------------
@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    updates: list[tuple[str, int]] = field(default_factory=list)
    best_metric: float = float("-inf")
    best_epoch: int = 0


def _snapshot(modules: Sequence[Module]) -> list[dict[str, np.ndarray]]:
    return [m.state_dict() for m in modules]


def _restore(modules: Sequence[Module], states) -> None:
    for m, s in zip(modules, states):
        m.load_state_dict(s)


def minimax_train(
    plan: TrainPlan,
    X,
    Y,
    energy,
    infnet: Module,
    evaluate: Callable[[Module], float] | None = None,
    anchor: Module | None = None,
    log: MetricsLog | None = None,
) -> TrainResult:
    """Alternate one mini-batch of inference-network (ascent) updates with one of energy (descent) updates.

    After every epoch ``evaluate(infnet)`` is logged and the best (energy,
    network) pair is kept; training stops after ``plan.patience`` epochs
    without improvement.
    """
    rng = np.random.default_rng(plan.seed)
    n_labels = energy.n_labels
    theta = _energy_module_params(energy)
    phi = infnet.parameters()
    anchor_state = [p.data.copy() for p in anchor.parameters()] if anchor is not None else None
    opt_phi = make_optimizer(plan.phi_optimizer, phi, plan.phi_lr, plan.phi_momentum)
    opt_theta = make_optimizer(plan.theta_optimizer, theta, plan.theta_lr)
    result = TrainResult()
    best_state = _snapshot([energy, infnet])
    stale = 0
    step = 0
    for epoch in range(1, plan.epochs + 1):
        hinge_sum = []
        for b, batch in enumerate(make_batches(X, Y, n_labels, plan.batch_size, rng)):
            where = f"epoch {epoch}, batch {b}"
            if step % 2 == 0:
                before = energy.param_hash() if plan.debug else None
                obj = phi_objective(batch, energy, infnet, plan, anchor_state)
                _finite_or_abort(obj, where)
                infnet.zero_grad()
                (-obj).backward()
                if any(p.grad is not None for p in theta):
                    raise AssertionError("gradient reached energy parameters during an inference-network step")
                opt_phi.step()
                infnet.zero_grad()
                if plan.debug and energy.param_hash() != before:
                    raise AssertionError("inference-network step changed energy parameters")
                result.updates.append(("phi", b))
            else:
                before = infnet.param_hash() if plan.debug else None
                obj = theta_objective(batch, energy, infnet, plan)
                _finite_or_abort(obj, where)
                for p in theta:
                    p.grad = None
                obj.backward()
                if any(p.grad is not None for p in phi):
                    raise AssertionError("gradient reached inference-network parameters during an energy step")
                opt_theta.step([p.grad for p in theta])
                for p in theta:
                    p.grad = None
                if plan.debug and infnet.param_hash() != before:
                    raise AssertionError("energy step changed inference-network parameters")
                result.updates.append(("theta", b))
            hinge_sum.append(obj.item())
            step += 1
        record = {"epoch": epoch, "objective": float(np.mean(hinge_sum)) if hinge_sum else 0.0}
        if log is not None:
            log(epoch, "train", "objective", record["objective"])
        if evaluate is not None:
            metric = float(evaluate(infnet))
            record["dev"] = metric
            if log is not None:
                log(epoch, "dev", "metric", metric)
            if metric > result.best_metric:
                result.best_metric, result.best_epoch = metric, epoch
                best_state = _snapshot([energy, infnet])
                stale = 0
            else:
                stale += 1
        result.history.append(record)
        if log is not None:
            log.flush()
        if evaluate is not None and stale >= plan.patience:
            break
    if evaluate is not None:
        _restore([energy, infnet], best_state)
    return result


# -- retuning ------------------------------------------------------------------
def mean_energy(energy, net: Module, batches: Sequence[Batch]) -> float:
    total = count = 0.0
    with ad.no_grad():
        for b in batches:
            e = energy.batch_energy(b.x, net(b.x)).data
            total += e.sum()
            count += len(e)
    return total / max(count, 1)


def retune(
    infnet: Module,
    energy,
    X,
    epochs: int = 20,
    lr: float = 1e-5,
    optimizer: str = "adam",
    batch_size: int = 32,
    seed: int = 0,
    log: MetricsLog | None = None,
):
    """Initialize a test-time network from ``infnet`` and minimize mean energy on unlabeled ``X``.

    Returns ``(net, energy_before, energy_after)``; if energy did not drop, the
    untouched copy of ``infnet`` is returned.
    """
    rng = np.random.default_rng(seed)
    n_labels = energy.n_labels
    psi = clone_module(infnet)
    eval_batches = make_batches(X, _dummy_targets(X, n_labels), n_labels, batch_size)
    before = mean_energy(energy, psi, eval_batches)
    if epochs <= 0:
        return psi, before, before
    opt = make_optimizer(optimizer, psi.parameters(), lr)
    theta = _energy_module_params(energy)
    for epoch in range(1, epochs + 1):
        for b, batch in enumerate(make_batches(X, _dummy_targets(X, n_labels), n_labels, batch_size, rng)):
            with frozen(theta):
                loss = ad.mean(energy.batch_energy(batch.x, psi(batch.x)))
            _finite_or_abort(loss, f"retune epoch {epoch}, batch {b}")
            psi.zero_grad()
            loss.backward()
            opt.step()
        if log is not None:
            log(epoch, "retune", "energy", mean_energy(energy, psi, eval_batches))
            log.flush()
    after = mean_energy(energy, psi, eval_batches)
    if after > before:
        logger.info("retuning raised mean energy (%.6f > %.6f); keeping the initial network", after, before)
        return clone_module(infnet), before, before
    return psi, before, after


def _dummy_targets(X, n_labels: int):
    """Labels are never used by retuning; zeros keep the batching code uniform."""
    if isinstance(X, np.ndarray) and X.ndim == 2:
        return np.zeros((len(X), n_labels))
    return [np.zeros(len(s), dtype=np.int64) for s in X]


# -- CRF, local, distillation and tag-LM trainers -------------------------------
def crf_nll(energy, batch: Batch) -> Tensor:
    """Mean per-sentence ``log Z - score(gold)`` under the chain energy's scores."""
    chain = getattr(energy, "chain", energy)
    unary = chain.unary(batch.x)
    log_z = crf_log_partition(unary, chain.transitions)
    gold = chain_path_score(unary, chain.transitions, batch.labels)
    return ad.mean(log_z - gold)


def _early_stopping_loop(
    n_epochs: int,
    patience: int,
    run_epoch: Callable[[int], float],
    evaluate: Callable[[], float] | None,
    modules: Sequence[Module],
    log: MetricsLog | None,
    loss_name: str = "loss",
) -> TrainResult:
    result = TrainResult()
    best_state = _snapshot(modules)
    stale = 0
    for epoch in range(1, n_epochs + 1):
        loss = run_epoch(epoch)
        record = {"epoch": epoch, loss_name: loss}
        if log is not None:
            log(epoch, "train", loss_name, loss)
        if evaluate is not None:
            metric = float(evaluate())
            record["dev"] = metric
            if log is not None:
                log(epoch, "dev", "metric", metric)
            if metric > result.best_metric:
                result.best_metric, result.best_epoch = metric, epoch
                best_state = _snapshot(modules)
                stale = 0
            else:
                stale += 1
        result.history.append(record)
        if log is not None:
            log.flush()
        if evaluate is not None and stale >= patience:
            break
    if evaluate is not None:
        _restore(modules, best_state)
    return result


def crf_nll_train(
    energy,
    X,
    Y,
    evaluate: Callable[[], float] | None = None,
    optimizer: str = "sgd",
    lr: float = 0.05,
    momentum: float = 0.9,
    l2: float = 0.0,
    epochs: int = 30,
    patience: int = 10,
    batch_size: int = 32,
    seed: int = 0,
    log: MetricsLog | None = None,
) -> TrainResult:
    """Conditional log-likelihood training of a chain energy with forward-backward gradients."""
    rng = np.random.default_rng(seed)
    params = energy.theta_parameters()
    opt = make_optimizer(optimizer, params, lr, momentum)

    def run_epoch(epoch):
        losses = []
        for b, batch in enumerate(make_batches(X, Y, energy.n_labels, batch_size, rng)):
            loss = crf_nll(energy, batch)
            if l2:
                loss = loss + l2 * l2_norm_sq(params)
            _finite_or_abort(loss, f"epoch {epoch}, batch {b}")
            energy.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        return float(np.mean(losses))

    return _early_stopping_loop(epochs, patience, run_epoch, evaluate, [energy], log, "nll")


def local_loss(net: Module, batch: Batch) -> Tensor:
    """Independent-label cross entropy (box outputs) or per-token log loss (simplex outputs)."""
    z = net.logits(batch.x)
    if net.relaxation == "box":
        # log(1 + e^z) - y z is the stable Bernoulli negative log-likelihood
        return ad.mean(_reduce_example(ad.softplus(z) - batch.gold * z))
    return ad.mean(_reduce_example(-(batch.gold * ad.log_softmax(z, axis=-1))))


def local_train(
    net: Module,
    X,
    Y,
    evaluate: Callable[[], float] | None = None,
    optimizer: str = "adam",
    lr: float = 0.001,
    momentum: float = 0.9,
    epochs: int = 10,
    patience: int = 10,
    batch_size: int = 32,
    seed: int = 0,
    log: MetricsLog | None = None,
) -> TrainResult:
    """Supervised training of a local classifier (MLC feature net or BLSTM tagger)."""
    rng = np.random.default_rng(seed)
    opt = make_optimizer(optimizer, net.parameters(), lr, momentum)

    def run_epoch(epoch):
        losses = []
        for b, batch in enumerate(make_batches(X, Y, net.n_labels, batch_size, rng)):
            loss = local_loss(net, batch)
            _finite_or_abort(loss, f"epoch {epoch}, batch {b}")
            net.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        return float(np.mean(losses))

    return _early_stopping_loop(epochs, patience, run_epoch, evaluate, [net], log)


def distill_loss(energy, net: Module, batch: Batch, stabilizer: str, weight: float, anchor=None) -> Tensor:
    """Mean energy of the network's outputs plus the chosen stabilization term."""
    with frozen(_energy_module_params(energy)):
        y = net(batch.x)
        loss = ad.mean(energy.batch_energy(batch.x, y))
    if stabilizer == "cross-entropy":
        loss = loss + weight * ad.mean(local_cross_entropy(y, batch.gold, net.relaxation))
    elif stabilizer == "entropy":
        loss = loss - weight * ad.mean(entropy(y, net.relaxation))
    elif stabilizer == "l2":
        loss = loss + weight * l2_distance_sq(net.parameters(), anchor)
    elif stabilizer != "none":
        raise ValueError(f"unknown stabilizer {stabilizer!r}; expected one of {STABILIZERS}")
    return loss


def distill(
    energy,
    net: Module,
    X,
    Y,
    stabilizer: str = "cross-entropy",
    weight: float = 1.0,
    evaluate: Callable[[], float] | None = None,
    anchor: Module | None = None,
    optimizer: str = "sgd",
    lr: float = 0.01,
    momentum: float = 0.9,
    epochs: int = 20,
    patience: int = 5,
    batch_size: int = 32,
    seed: int = 0,
    log: MetricsLog | None = None,
) -> TrainResult:
    """Train an inference network to minimize a fixed energy (with an optional stabilizer)."""
    if stabilizer not in STABILIZERS:
        raise ValueError(f"unknown stabilizer {stabilizer!r}; expected one of {STABILIZERS}")
    if stabilizer == "l2" and anchor is None:
        raise ValueError("the squared-L2 stabilizer needs a pretrained anchor network")
    rng = np.random.default_rng(seed)
    anchor_state = [p.data.copy() for p in anchor.parameters()] if anchor is not None else None
    opt = make_optimizer(optimizer, net.parameters(), lr, momentum)

    def run_epoch(epoch):
        losses = []
        for b, batch in enumerate(make_batches(X, Y, net.n_labels, batch_size, rng)):
            loss = distill_loss(energy, net, batch, stabilizer, weight, anchor_state)
            _finite_or_abort(loss, f"epoch {epoch}, batch {b}")
            net.zero_grad()
            loss.backward()
            opt.step()
            losses.append(loss.item())
        return float(np.mean(losses))

    return _early_stopping_loop(epochs, patience, run_epoch, evaluate, [net], log)


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> float:
    total = float(np.sqrt(sum(float(np.sum(p.grad * p.grad)) for p in params if p.grad is not None)))
    if total > max_norm:
        scale = max_norm / (total + 1e-12)
        for p in params:
            if p.grad is not None:
                p.grad *= scale
    return total


def tag_lm_batch_nll(cell: TagLMCell, tags: np.ndarray, rng=None) -> tuple[Tensor, int]:
    """Summed NLL of a (B, N) batch of tag-id sequences including the end symbol."""
    B, N = tags.shape
    inputs = np.zeros((B, N + 1, cell.n_tags + 1))
    inputs[:, 0, cell.bos] = 1.0
    inputs[np.arange(B)[:, None], np.arange(1, N + 1)[None, :], tags] = 1.0
    targets = np.concatenate([tags, np.full((B, 1), cell.eos)], axis=1)
    log_p = cell.log_probs(inputs, rng=rng)
    picked = log_p[np.arange(B)[:, None], np.arange(N + 1)[None, :], targets]
    return -ad.tsum(picked), B * (N + 1)


def tag_lm_perplexity(cell: TagLMCell, sequences: Sequence[np.ndarray], batch_size: int = 64) -> float:
    was_training = cell.training
    cell.train(False)
    total = count = 0.0
    with ad.no_grad():
        for idx in batch_indices([len(s) for s in sequences], batch_size):
            nll, n = tag_lm_batch_nll(cell, np.stack([sequences[i] for i in idx]))
            total += nll.item()
            count += n
    cell.train(was_training)
    return float(np.exp(total / count))


def train_tag_lm(
    train: Sequence[Sequence[int]],
    dev: Sequence[Sequence[int]],
    n_tags: int,
    hidden_dim: int = 50,
    n_layers: int = 1,
    dropout: float = 0.5,
    lr: float = 0.5,
    momentum: float = 0.9,
    epochs: int = 20,
    patience: int = 3,
    batch_size: int = 32,
    clip: float = 5.0,
    seed: int = 0,
    log: MetricsLog | None = None,
):
    """Fit an LSTM tag language model with SGD-momentum and dev-perplexity early stopping.

    Returns ``(cell, dev_perplexity, result)``; the cell comes back frozen in eval mode.
    """
    if len(train) == 0:
        raise ValueError("cannot train a tag language model on an empty corpus")
    rng = np.random.default_rng(seed)
    cell = TagLMCell(n_tags, hidden_dim, rng, n_layers=n_layers, dropout=dropout)
    train = [np.asarray(s, dtype=np.int64) for s in train]
    dev = [np.asarray(s, dtype=np.int64) for s in dev] or train
    opt = make_optimizer("sgd", cell.parameters(), lr, momentum)
    params = cell.parameters()

    def run_epoch(epoch):
        cell.train(True)
        losses = []
        for b, idx in enumerate(batch_indices([len(s) for s in train], batch_size, rng)):
            nll, n = tag_lm_batch_nll(cell, np.stack([train[i] for i in idx]), rng=rng)
            loss = nll * (1.0 / n)
            _finite_or_abort(loss, f"epoch {epoch}, batch {b}")
            cell.zero_grad()
            loss.backward()
            clip_grad_norm(params, clip)
            opt.step()
            losses.append(loss.item())
        cell.train(False)
        return float(np.mean(losses))

    result = _early_stopping_loop(
        epochs, patience, run_epoch, lambda: -tag_lm_perplexity(cell, dev), [cell], log, "nll"
    )
    cell.train(False)
    cell.set_trainable(False)
    return cell, tag_lm_perplexity(cell, dev), result


# -- thresholds ------------------------------------------------------------------
def tune_threshold(probs, gold_sets, grid: Sequence[float] = TAU_GRID) -> float:
    """Grid threshold maximizing example-averaged F1 on development data; ties go to the smaller value."""
    probs = np.asarray(probs, dtype=float)
    if len(probs) == 0:
        raise ValueError("threshold tuning needs a nonempty development set")
    best_tau, best_f1 = None, -1.0
    for tau in sorted(grid):
        preds = [set(np.flatnonzero(row > tau).tolist()) for row in probs]
        f1 = example_f1(preds, gold_sets)
        if f1 > best_f1:
            best_tau, best_f1 = tau, f1
    return float(best_tau)
