"""Acceptance criteria, one test per criterion.

Each test records a PASS/FAIL/WAIVED line that is printed with the pytest
terminal summary (and immediately, when run with ``-s``).
"""

import itertools
import os
import time
from pathlib import Path

import numpy as np
import pytest
from conftest import make_chain
from oracles import brute_force_argmax, brute_force_log_z, random_chain

from infnet import autodiff as ad
from infnet.cli import bench_decoders, main
from infnet.data import gen_hmm, random_hmm_spec, read_mlc
from infnet.energies import MLCEnergy, TLMEnergy, one_hot
from infnet.estimators import (
    BLSTMTagger,
    CRFTagger,
    InferenceNetworkTagger,
    MLPMultiLabelClassifier,
    SPENMultiLabelClassifier,
    SPENTagger,
    TagLanguageModel,
)
from infnet.inference import MLCInferenceNet, SeqInferenceNet, crf_log_partition, forward_backward, viterbi
from infnet.nn import MLP, EmbeddingTable, TagLMCell
from infnet.training import (
    Batch,
    StabilizerWeights,
    TrainPlan,
    crf_nll,
    hinge,
    phi_objective,
    retune,
    theta_objective,
)

RESULTS: list[str] = []
BIBTEX_ENV = "INFNET_BIBTEX_DIR"


def verdict(number: int, ok: bool, detail: str) -> None:
    line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


# -- shared synthetic sequence task --------------------------------------------------
class HMMTask:
    """The L=8, V=50 HMM task with 5k/1k/1k splits and frozen random embeddings."""

    hidden_dim = 32
    embedding_dim = 20

    def __init__(self, seed: int = 0):
        self.spec = random_hmm_spec(8, 50, seed=seed)
        full = gen_hmm(self.spec, 7000, (5, 20), seed=seed + 1)
        self.train, self.dev, self.test = full.sentences[:5000], full.sentences[5000:6000], full.sentences[6000:]
        self.table = EmbeddingTable.random(self.spec.token_names, self.embedding_dim, np.random.default_rng(seed))
        self.tags = self.spec.tag_names

    @staticmethod
    def xy(split):
        return [list(t) for t, _ in split], [list(g) for _, g in split]

    def common(self):
        return dict(hidden_dim=self.hidden_dim, embedding_dim=self.embedding_dim, embeddings=self.table, tags=self.tags)


@pytest.fixture(scope="module")
def hmm():
    task = HMMTask()
    start = time.perf_counter()
    crf = CRFTagger(lr=0.05, epochs=15, patience=4, **task.common()).fit(*task.xy(task.train), *task.xy(task.dev))
    task.crf_seconds = time.perf_counter() - start
    task.crf = crf
    return task


# -- 1 -------------------------------------------------------------------------------
def test_criterion_01_exact_inference_oracles():
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    path_mismatch, worst = 0, 0.0
    for _ in range(200):
        unary, W = random_chain(rng, max_n=6, max_l=4)
        path, _ = viterbi(unary, W)
        best, _ = brute_force_argmax(unary, W)
        path_mismatch += path != best
        log_z, _, _ = forward_backward(unary, W)
        worst = max(worst, abs(log_z - brute_force_log_z(unary, W)))
    seconds = time.perf_counter() - start
    ok = path_mismatch == 0 and worst < 1e-9 and seconds < 10
    verdict(1, ok, f"viterbi mismatches {path_mismatch}/200, max |logZ error| {worst:.2e}, {seconds:.2f}s")


# -- 2 -------------------------------------------------------------------------------
def test_criterion_02_gradient_integrity():
    rng = np.random.default_rng(7)
    start = time.perf_counter()
    errors = {}

    feature_net = MLP([6, 5, 4], rng)
    mlc = MLCEnergy(feature_net, 4, rng)
    x = rng.normal(size=(2, 6))
    y = ad.parameter(rng.uniform(0.05, 0.95, size=(2, 4)))
    errors["mlc energy (y)"] = ad.finite_diff_check(lambda: ad.tsum(mlc.batch_energy(x, y)), [y])
    errors["mlc energy (params)"] = ad.finite_diff_check(
        lambda: ad.tsum(mlc.batch_energy(x, y)), [mlc.label_vectors, mlc.c1, mlc.c2, *feature_net.parameters()]
    )

    chain = make_chain(n_labels=3, seed=7)
    ids = rng.integers(0, 6, size=(2, 4))
    z = rng.normal(size=(2, 4, 3))
    ys = ad.parameter(np.exp(z) / np.exp(z).sum(-1, keepdims=True))
    errors["chain energy"] = ad.finite_diff_check(lambda: ad.tsum(chain.batch_energy(ids, ys)), [ys, *chain.parameters()])

    tlm = TLMEnergy(TagLMCell(3, 4, rng))
    errors["tlm energy"] = ad.finite_diff_check(lambda: ad.tsum(tlm.batch_energy(None, ys)), [ys])

    labels = rng.integers(0, 3, size=(2, 4))
    seq_batch = Batch(ids, one_hot(labels, 3), labels)
    errors["crf nll"] = ad.finite_diff_check(lambda: crf_nll(chain, seq_batch), chain.parameters())
    unary = ad.parameter(rng.normal(size=(2, 4, 3)))
    errors["crf log partition"] = ad.finite_diff_check(lambda: ad.tsum(crf_log_partition(unary, chain.transitions)), [unary])

    weights = StabilizerWeights(l2_phi=0.1, entropy=-0.5, cross_entropy=0.3, anchor=0.2, l2_theta=0.05)
    mlc_net = MLCInferenceNet(6, [5], 4, rng)
    mlc_batch = Batch(x, (rng.random((2, 4)) < 0.5).astype(float))
    anchor = [p.data + 0.05 for p in mlc_net.parameters()]
    for hinge_kind, cost_kind in (("margin-rescaled", "l2"), ("slack-rescaled", "l2"), ("contrastive", "l2")):
        plan = TrainPlan(hinge=hinge_kind, cost=cost_kind, weights=weights)
        errors[f"phi objective mlc {hinge_kind}"] = ad.finite_diff_check(
            lambda: phi_objective(mlc_batch, mlc, mlc_net, plan, anchor), mlc_net.parameters())
        errors[f"theta objective mlc {hinge_kind}"] = ad.finite_diff_check(
            lambda: theta_objective(mlc_batch, mlc, mlc_net, plan), mlc.theta_parameters())
    seq_net = SeqInferenceNet(chain.table, 4, 3, rng)
    seq_anchor = [p.data + 0.05 for p in seq_net.parameters()]
    plan = TrainPlan(hinge="margin-rescaled", cost="l1", weights=weights)
    errors["phi objective seq"] = ad.finite_diff_check(
        lambda: phi_objective(seq_batch, chain, seq_net, plan, seq_anchor), seq_net.parameters())
    errors["theta objective seq"] = ad.finite_diff_check(
        lambda: theta_objective(seq_batch, chain, seq_net, plan), chain.theta_parameters())

    seconds = time.perf_counter() - start
    worst_name = max(errors, key=errors.get)
    ok = all(v < 1e-4 for v in errors.values()) and seconds < 60
    verdict(2, ok, f"{len(errors)} checks, worst {worst_name} {errors[worst_name]:.2e}, {seconds:.2f}s")


# -- 3 -------------------------------------------------------------------------------
def test_criterion_03_one_hot_reduction():
    worst, count = 0.0, 0
    for n_labels in (1, 2, 3):
        chain = make_chain(n_labels=n_labels, seed=n_labels)
        rng = np.random.default_rng(n_labels)
        for n in range(1, 6):
            ids = rng.integers(0, 6, size=n)
            for labels in itertools.product(range(n_labels), repeat=n):
                with ad.no_grad():
                    relaxed = chain.energy(ids, one_hot(labels, n_labels)).item()
                worst = max(worst, abs(relaxed - chain.discrete_energy(ids, labels)))
                count += 1
    verdict(3, worst <= 1e-12, f"{count} labelings, max |relaxed - discrete| {worst:.2e}")


# -- 4 -------------------------------------------------------------------------------
def test_criterion_04_loss_equivalences():
    rng = np.random.default_rng(4)
    delta = rng.uniform(0, 5, 1000)
    e_pred, e_gold = rng.normal(0, 3, 1000), rng.normal(0, 3, 1000)
    perceptron = np.abs(hinge("perceptron", delta, e_pred, e_gold).data - hinge("margin-rescaled", 0.0, e_pred, e_gold).data).max()
    contrastive = np.abs(hinge("contrastive", delta, e_pred, e_gold).data - hinge("margin-rescaled", 1.0, e_pred, e_gold).data).max()
    shift = rng.normal(0, 10, 1000)
    invariance = 0.0
    for kind in ("margin-rescaled", "slack-rescaled"):
        base = hinge(kind, delta, e_pred, e_gold).data
        moved = hinge(kind, delta, e_pred + shift, e_gold + shift).data
        invariance = max(invariance, np.abs(base - moved).max())
    # adding a shift and rounding can move values by a few ulps of the shifted energies
    ok = perceptron <= 1e-12 and contrastive <= 1e-12 and invariance <= 1e-12
    verdict(4, ok, f"perceptron {perceptron:.1e}, contrastive {contrastive:.1e}, shift invariance {invariance:.1e}")


# -- 5 -------------------------------------------------------------------------------
def _bibtex_splits(root: Path):
    train = read_mlc(root / "train.mlc")
    test = read_mlc(root / "test.mlc")
    if (root / "dev.mlc").exists():
        dev = read_mlc(root / "dev.mlc")
        return (train.dense(), train.label_matrix()), (dev.dense(), dev.label_matrix()), (test.dense(), test.label_matrix())
    X, Y = train.dense(), train.label_matrix()
    cut = int(0.8 * len(X))
    return (X[:cut], Y[:cut]), (X[cut:], Y[cut:]), (test.dense(), test.label_matrix())


def test_criterion_05_bibtex():
    root = os.environ.get(BIBTEX_ENV)
    if not root or not (Path(root) / "train.mlc").exists():
        RESULTS.append(f"criterion  5: WAIVED  no Bibtex data ({BIBTEX_ENV} unset); criterion 6 governs")
        pytest.skip("Bibtex data not supplied")
    (X, Y), (Xd, Yd), (Xt, Yt) = _bibtex_splits(Path(root))
    start = time.perf_counter()
    spen = SPENMultiLabelClassifier(hinge="contrastive").fit(X, Y, Xd, Yd)
    mlp = MLPMultiLabelClassifier().fit(X, Y, Xd, Yd)
    spen_f1, mlp_f1 = 100 * spen.score(Xt, Yt), 100 * mlp.score(Xt, Yt)
    seconds = time.perf_counter() - start
    verdict(5, spen_f1 >= 40.0 and spen_f1 > mlp_f1, f"SPEN test F1 {spen_f1:.2f}, MLP {mlp_f1:.2f}, {seconds:.0f}s")


# -- 6 -------------------------------------------------------------------------------
def test_criterion_06_synthetic_sequence_task(hmm):
    start = time.perf_counter()
    Xd, yd = hmm.xy(hmm.dev)
    Xt, yt = hmm.xy(hmm.test)
    blstm = BLSTMTagger(lr=0.01, epochs=15, patience=4, **hmm.common()).fit(*hmm.xy(hmm.train), Xd, yd)
    crf_acc, blstm_acc = 100 * hmm.crf.score(Xt, yt), 100 * blstm.score(Xt, yt)

    distilled = {}
    for stabilizer in ("cross-entropy", "none"):
        net = InferenceNetworkTagger(hmm.crf, stabilizer=stabilizer, optimizer="adam", lr=0.005, epochs=20, patience=5)
        distilled[stabilizer] = net.fit(*hmm.xy(hmm.train), Xd, yd)
    hmm.infnet = distilled["cross-entropy"]
    ce_acc = 100 * distilled["cross-entropy"].score(Xt, yt)
    none_acc = 100 * distilled["none"].score(Xt, yt)
    ce_dev, crf_dev = 100 * distilled["cross-entropy"].score(Xd, yd), 100 * hmm.crf.score(Xd, yd)
    seconds = time.perf_counter() - start + hmm.crf_seconds

    a, b, c = crf_acc > blstm_acc, ce_acc >= crf_acc - 0.5, none_acc <= ce_acc - 10.0
    detail = (
        f"test accuracy: (a) CRF {crf_acc:.2f} vs BLSTM {blstm_acc:.2f} [{'ok' if a else 'no'}]; "
        f"(b) distilled {ce_acc:.2f} vs Viterbi {crf_acc:.2f} [{'ok' if b else 'no'}] "
        f"(dev {ce_dev:.2f} vs {crf_dev:.2f}); "
        f"(c) no stabilizer {none_acc:.2f} [{'ok' if c else 'no'}]; {seconds:.0f}s"
    )
    verdict(6, a and b and c and seconds < 20 * 60, detail)


# -- 7 -------------------------------------------------------------------------------
def test_criterion_07_throughput(hmm):
    net = getattr(hmm, "infnet", None)
    if net is None:
        Xd, yd = hmm.xy(hmm.dev)
        net = InferenceNetworkTagger(hmm.crf, epochs=1).fit(*hmm.xy(hmm.train), Xd, yd)
    tokens, _ = hmm.xy(hmm.test)
    speeds = bench_decoders(net, tokens, batch_size=32, repeats=5)
    ratio = speeds["infnet"] / speeds["viterbi"]
    detail = f"infnet {speeds['infnet']:.0f}/s, Viterbi {speeds['viterbi']:.0f}/s at batch 32, ratio {ratio:.2f}"
    verdict(7, ratio >= 1.5, detail)


# -- 8 -------------------------------------------------------------------------------
def test_criterion_08_retuning_never_raises_energy():
    spec = random_hmm_spec(5, 20, seed=8)
    train, dev = gen_hmm(spec, 200, (4, 10), seed=1), gen_hmm(spec, 60, (4, 10), seed=2)
    rows = []
    seq = SPENTagger(hidden_dim=12, embedding_dim=8, epochs=3, batch_size=16, seed=0).fit(
        train.tokens, train.tag_sequences, dev.tokens, dev.tag_sequences)
    ids = seq._ids(dev.tokens)
    for lr in (1e-5, 1e-3, 1.0):
        _, before, after = retune(seq.infnet_, seq.energy_, ids, epochs=5, lr=lr, batch_size=16)
        rows.append(("seq", lr, before, after))

    rng = np.random.default_rng(8)
    X = rng.normal(size=(200, 12))
    Y = (X[:, :6] + 0.5 * rng.normal(size=(200, 6)) > 0.6).astype(float)
    mlc = SPENMultiLabelClassifier(hidden=(16, 16), epochs=3, pretrain_epochs=3, retune_epochs=0, batch_size=32)
    mlc.fit(X[:150], Y[:150], X[150:], Y[150:])
    for lr in (1e-5, 1e-3, 1.0):
        _, before, after = retune(mlc.infnet_, mlc.energy_, X[150:], epochs=5, lr=lr, batch_size=16)
        rows.append(("mlc", lr, before, after))
    ok = all(after <= before for _, _, before, after in rows)
    detail = "; ".join(f"{task} lr={lr:g}: {before:.4f} -> {after:.4f}" for task, lr, before, after in rows)
    verdict(8, ok, detail)


# -- 9 -------------------------------------------------------------------------------
def test_criterion_09_tag_language_model(hmm):
    _, y_train = hmm.xy(hmm.train)
    Xd, yd = hmm.xy(hmm.dev)
    lm = TagLanguageModel(hidden_dim=32, epochs=5, tags=hmm.tags).fit(y_train, yd)
    energy = lm.energy()
    worst = 0.0
    for tags in yd[:200]:
        ids = [lm.tag_index_[t] for t in tags]
        with ad.no_grad():
            relaxed = energy.energy(None, one_hot(ids, len(hmm.tags))).item()
        worst = max(worst, abs(relaxed - lm.nll(tags)))

    def predictions(weight):
        net = InferenceNetworkTagger(hmm.crf, tlm=lm, tlm_weight=weight, optimizer="adam", lr=0.005, epochs=3, seed=0)
        return net.fit(*hmm.xy(hmm.train)).predict(Xd)

    base = predictions(0.0)
    changed = {}
    for weight in (0.1, 0.2, 0.5):
        pred = predictions(weight)
        changed[weight] = sum(a != b for a, b in zip(pred, base))
    ok = worst <= 1e-9 and all(v >= 1 for v in changed.values())
    detail = f"max |one-hot energy - NLL| {worst:.1e}; dev sentences changed vs w=0: " + ", ".join(
        f"w={w}: {n}" for w, n in changed.items())
    verdict(9, ok, detail)


# -- 10 ------------------------------------------------------------------------------
def test_criterion_10_cli_determinism(tmp_path):
    data = tmp_path / "data"
    synth = ["--override", "synth.n_train=120", "--override", "synth.n_dev=40", "--override", "synth.n_test=40",
             "--override", "synth.n_states=5", "--override", "synth.n_symbols=20", "--override", "synth.embedding_dim=8"]
    assert main(["gen-synth", "--seed", "3", "--override", f"run.output_dir={data}", *synth]) == 0
    mlc_data = tmp_path / "mlc"
    assert main(["gen-synth", "--seed", "3", "--override", f"run.output_dir={mlc_data}", "--override", "run.task=mlc",
                 "--override", "synth.n_train=100", "--override", "synth.n_dev=40", "--override", "synth.n_test=40"]) == 0
    seq_cfg = tmp_path / "seq.ini"
    seq_cfg.write_text(
        f"[data]\ntrain = {data}/train.conll\ndev = {data}/dev.conll\ntest = {data}/test.conll\n"
        f"embeddings = {data}/embeddings.txt\nembedding_dim = 8\n[model]\nhidden_dim = 8\n"
        "[train]\nepochs = 2\nbatch_size = 16\nretune_epochs = 2\nretune_lr = 0.001\n", encoding="utf-8")
    mlc_cfg = tmp_path / "mlc.ini"
    mlc_cfg.write_text(
        f"[run]\ntask = mlc\n[data]\ntrain = {mlc_data}/train.mlc\ndev = {mlc_data}/dev.mlc\ntest = {mlc_data}/test.mlc\n"
        "[model]\nhidden = 16,16\n[train]\nhinge = contrastive\nepochs = 2\npretrain_epochs = 2\nretune_epochs = 2\n",
        encoding="utf-8")

    def model(name):
        return ["--override", f"run.model={tmp_path}/first/{name}/model.bin"]

    commands = {
        "gen-synth": ["gen-synth", "--seed", "5", *synth],
        "train-crf": ["train-crf", "--config", str(seq_cfg)],
        "train-blstm": ["train-blstm", "--config", str(seq_cfg)],
        "train-tlm": ["train-tlm", "--config", str(seq_cfg)],
        "train-spen-seq": ["train-spen", "--config", str(seq_cfg)],
        "train-spen-mlc": ["train-spen", "--config", str(mlc_cfg)],
        "distill": ["distill", "--config", str(seq_cfg), *model("train-crf"), "--override", "train.epochs=2"],
        "retune": ["retune", "--config", str(seq_cfg), *model("train-spen-seq")],
        "eval": ["eval", "--config", str(mlc_cfg), *model("train-spen-mlc")],
        "export-pairwise": ["export-pairwise", "--config", str(seq_cfg), *model("train-crf")],
        "bench": ["bench", "--config", str(seq_cfg), *model("distill")],
    }
    identical = []
    for name, argv in commands.items():
        logs = []
        for attempt in ("first", "second"):
            out = tmp_path / attempt / name
            assert main([*argv, "--override", f"run.output_dir={out}"]) == 0, name
            logs.append((out / "metrics.log").read_bytes())
        identical.append(logs[0] == logs[1])
    differing = [name for name, same in zip(commands, identical) if not same]
    verdict(10, not differing, f"{sum(identical)}/{len(commands)} commands reproduce metrics.log byte for byte"
            + (f"; differing: {', '.join(differing)}" if differing else ""))
