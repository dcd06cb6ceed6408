"""Command-line entry point.

Every command reads a ``key = value`` config file (``--config``), applies
``--override section.key=value`` flags and ``--seed``, and writes into the
output directory: ``metrics.log`` (``epoch<TAB>split<TAB>metric<TAB>value``),
``report.tsv`` (``key<TAB>value``) and, for training commands, ``model.bin``.

Exit codes: 0 success, 1 configuration or input error, 2 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import NumericError
from .config import ConfigError, RunConfig, load_config
from .data import FormatError, SeqDataset, bio2_to_bioes, gen_hmm, make_mlc_synthetic, random_hmm_spec, read_conll, read_mlc, write_conll, write_mlc
from .estimators import (
    BLSTMTagger,
    CRFTagger,
    InferenceNetworkTagger,
    SPENMultiLabelClassifier,
    SPENTagger,
    TagLanguageModel,
    label_sets,
    load_estimator,
    save_estimator,
)
from .inference import decode_infnet, decode_viterbi
from .metrics import chunk_f1, example_f1, token_accuracy
from .modelfile import ModelFileError
from .nn import EmbeddingTable, write_embeddings
from .training import MetricsLog, retune, tune_threshold

logger = logging.getLogger("infnet")

OUTPUT_ROOT_ENV = "INFNET_OUTPUT_ROOT"
COMMANDS = ("train-spen", "train-crf", "train-blstm", "train-tlm", "distill", "retune", "eval", "bench", "gen-synth", "export-pairwise")


class Run:
    """Output directory, metrics log and report rows of one command."""

    def __init__(self, command: str, cfg: RunConfig):
        self.command, self.cfg = command, cfg
        out = cfg["run.output_dir"] or str(Path(os.environ.get(OUTPUT_ROOT_ENV, "runs")) / command)
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self._log_fh = open(self.out / "metrics.log", "w", encoding="utf-8", newline="\n")
        self.log = MetricsLog(self._log_fh)
        self.rows: list[tuple[str, str]] = [("command", command), ("seed", str(cfg["run.seed"]))]

    def report(self, key: str, value) -> None:
        if isinstance(value, float):
            value = f"{value:.6f}"
        self.rows.append((key, str(value)))

    def close(self) -> None:
        self._log_fh.close()
        with open(self.out / "report.tsv", "w", encoding="utf-8", newline="\n") as fh:
            for key, value in self.rows:
                fh.write(f"{key}\t{value}\n")
        with open(self.out / "config.tsv", "w", encoding="utf-8", newline="\n") as fh:
            fh.write("\n".join(self.cfg.as_lines()) + "\n")

    @property
    def model_path(self) -> Path:
        return self.out / "model.bin"


# -- data loading ---------------------------------------------------------------
def _read_seq(run: Run, key: str, tags=None) -> SeqDataset | None:
    path = run.cfg[key]
    if not path:
        return None
    ds = read_conll(path, None if run.cfg["data.bioes"] else tags)
    if run.cfg["data.bioes"]:
        stats: dict = {}
        converted = [(tok, bio2_to_bioes(tag, stats)) for tok, tag in ds.sentences]
        run.report(f"{key}.repaired_tags", stats.get("repaired", 0))
        ds = SeqDataset(converted)
        if tags is not None:
            unknown = set(ds.tags) - set(tags)
            if unknown:
                raise FormatError(f"{path}: tags {sorted(unknown)} not in the tag vocabulary")
    return ds


def _read_mlc(run: Run, key: str):
    path = run.cfg[key]
    if not path:
        return None, None
    ds = read_mlc(path)
    return ds.dense(), ds.label_matrix()


def _embeddings(cfg: RunConfig):
    return cfg["data.embeddings"] or None


def _seq_splits(run: Run):
    run.cfg.require("data.train")
    train = _read_seq(run, "data.train")
    dev = _read_seq(run, "data.dev", train.tags)
    test = _read_seq(run, "data.test", train.tags)
    return train, dev, test


def _xy(ds: SeqDataset | None):
    return (ds.tokens, ds.tag_sequences) if ds is not None else (None, None)


def _seq_scores(run: Run, name: str, pred, gold) -> None:
    run.report(f"{name}.accuracy", token_accuracy(pred, gold))
    if run.cfg["data.bioes"]:
        p, r, f = chunk_f1(pred, gold)
        run.report(f"{name}.chunk_precision", p)
        run.report(f"{name}.chunk_recall", r)
        run.report(f"{name}.chunk_f1", f)


def _tlm(run: Run):
    path = run.cfg["run.tlm_model"]
    if not path:
        return None
    tlm = load_estimator(path)
    if not isinstance(tlm, TagLanguageModel):
        raise ConfigError(f"run.tlm_model: {path} does not hold a tag language model")
    return tlm


# -- commands ---------------------------------------------------------------------
def cmd_train_spen(run: Run) -> None:
    cfg, t = run.cfg, run.cfg.section("train")
    seed = cfg["run.seed"]
    if cfg["run.task"] == "mlc":
        run.cfg.require("data.train")
        X, Y = _read_mlc(run, "data.train")
        Xd, Yd = _read_mlc(run, "data.dev")
        Xt, Yt = _read_mlc(run, "data.test")
        Xu, _ = _read_mlc(run, "data.unlabeled")
        est = SPENMultiLabelClassifier(
            hidden=cfg["model.hidden"], energy_hidden=cfg["model.energy_hidden"], hinge=t["hinge"],
            cost=t["cost"] or "l2", l2_phi=t["l2_phi"], entropy=t["entropy"], anchor=t["anchor"],
            l2_theta=t["l2_theta"], phi_lr=t["phi_lr"], theta_lr=t["theta_lr"], batch_size=t["batch_size"],
            epochs=t["epochs"], patience=t["patience"], pretrain_epochs=t["pretrain_epochs"],
            pretrain_lr=t["pretrain_lr"], pretrained_init=t["pretrained_init"], retune_epochs=t["retune_epochs"],
            retune_lr=t["retune_lr"], seed=seed, debug=cfg["run.debug"],
        ).fit(X, Y, Xd, Yd, X_unlabeled=Xu, log=run.log)
        run.report("tau", est.tau_)
        run.report("retune.energy_before", est.energy_before_retune_)
        run.report("retune.energy_after", est.energy_after_retune_)
        dev_X, dev_Y = (Xd, Yd) if Xd is not None else (X, Y)
        with ad.no_grad():
            mlp_tau = tune_threshold(est.feature_net_(dev_X).data, label_sets(dev_Y))
        run.report("mlp.tau", mlp_tau)
        for split, (Xs, Ys) in (("dev", (Xd, Yd)), ("test", (Xt, Yt))):
            if Xs is None:
                continue
            run.report(f"{split}.spen_f1", est.score(Xs, Ys))
            run.report(f"{split}.spen_phi_f1", example_f1(label_sets(est.predict_proba(Xs, "phi") > est.tau_), label_sets(Ys)))
            with ad.no_grad():
                mlp_pred = est.feature_net_(Xs).data > mlp_tau
            run.report(f"{split}.mlp_f1", example_f1(label_sets(mlp_pred), label_sets(Ys)))
        save_estimator(run.model_path, est, seed=seed, task="mlc")
        return
    train, dev, test = _seq_splits(run)
    est = SPENTagger(
        hidden_dim=cfg["model.hidden_dim"], embedding_dim=cfg["data.embedding_dim"], embeddings=_embeddings(cfg),
        tags=train.tags, hinge=t["hinge"], cost=t["cost"] or "l1", normalize_cost=t["normalize_cost"],
        l2_phi=t["l2_phi"], entropy=t["entropy"], cross_entropy=t["cross_entropy"], anchor=t["anchor"],
        l2_theta=t["l2_theta"], phi_optimizer=t["phi_optimizer"], phi_lr=t["phi_lr"],
        phi_momentum=t["phi_momentum"], theta_optimizer=t["theta_optimizer"], theta_lr=t["theta_lr"],
        batch_size=t["batch_size"], epochs=t["epochs"], patience=t["patience"],
        pretrained_init=t["pretrained_init"] if cfg.is_set("train.pretrained_init") else False,
        pretrain_epochs=t["pretrain_epochs"], retune_epochs=t["retune_epochs"] if cfg.is_set("train.retune_epochs") else 0,
        retune_lr=t["retune_lr"], tlm=_tlm(run), tlm_weight=cfg["model.tlm_weight"], seed=seed, debug=cfg["run.debug"],
    )
    unlabeled = _read_seq(run, "data.unlabeled")
    est.fit(*_xy(train), *_xy(dev), X_unlabeled=unlabeled.tokens if unlabeled else None, log=run.log)
    for split, ds in (("dev", dev), ("test", test)):
        if ds is not None:
            _seq_scores(run, f"{split}.spen", est.predict(ds.tokens), ds.tag_sequences)
    save_estimator(run.model_path, est, seed=seed, task="seq")


def cmd_train_crf(run: Run) -> None:
    cfg, t = run.cfg, run.cfg.section("train")
    train, dev, test = _seq_splits(run)
    est = CRFTagger(
        hidden_dim=cfg["model.hidden_dim"], embedding_dim=cfg["data.embedding_dim"], embeddings=_embeddings(cfg),
        tags=train.tags, optimizer=t["optimizer"] if cfg.is_set("train.optimizer") else "sgd",
        lr=t["lr"] if cfg.is_set("train.lr") else 0.05, momentum=t["momentum"], l2=t["l2"],
        epochs=t["epochs"], patience=t["patience"], batch_size=t["batch_size"], seed=cfg["run.seed"],
    ).fit(*_xy(train), *_xy(dev), log=run.log)
    for split, ds in (("dev", dev), ("test", test)):
        if ds is not None:
            _seq_scores(run, f"{split}.crf", est.predict(ds.tokens), ds.tag_sequences)
    save_estimator(run.model_path, est, seed=cfg["run.seed"], task="seq")


def cmd_train_blstm(run: Run) -> None:
    cfg, t = run.cfg, run.cfg.section("train")
    train, dev, test = _seq_splits(run)
    est = BLSTMTagger(
        hidden_dim=cfg["model.hidden_dim"], embedding_dim=cfg["data.embedding_dim"], embeddings=_embeddings(cfg),
        tags=train.tags, optimizer=t["optimizer"], lr=t["lr"], momentum=t["momentum"], epochs=t["epochs"],
        patience=t["patience"], batch_size=t["batch_size"], seed=cfg["run.seed"],
    ).fit(*_xy(train), *_xy(dev), log=run.log)
    for split, ds in (("dev", dev), ("test", test)):
        if ds is not None:
            _seq_scores(run, f"{split}.blstm", est.predict(ds.tokens), ds.tag_sequences)
    save_estimator(run.model_path, est, seed=cfg["run.seed"], task="seq")


def cmd_train_tlm(run: Run) -> None:
    cfg, t = run.cfg, run.cfg.section("train")
    train, dev, _ = _seq_splits(run)
    sequences = train.tag_sequences
    if cfg["data.unlabeled"]:
        cfg.require("run.model")
        tagger = load_estimator(cfg["run.model"])
        from .data import auto_tag

        unlabeled = _read_seq(run, "data.unlabeled")
        sequences = auto_tag(tagger, unlabeled.tokens)
        run.report("auto_tagged_sentences", len(sequences))
    est = TagLanguageModel(
        hidden_dim=cfg["model.tlm_hidden"], n_layers=cfg["model.tlm_layers"], dropout=cfg["model.tlm_dropout"],
        lr=t["lr"] if cfg.is_set("train.lr") else 0.5, momentum=t["momentum"],
        epochs=t["epochs"] if cfg.is_set("train.epochs") else 20, patience=t["patience"] if cfg.is_set("train.patience") else 3,
        batch_size=t["batch_size"], clip=t["clip"], tags=train.tags, seed=cfg["run.seed"],
    ).fit(sequences, dev.tag_sequences if dev is not None else None, log=run.log)
    run.report("dev.perplexity", est.perplexity_)
    save_estimator(run.model_path, est, seed=cfg["run.seed"], task="tlm")


def cmd_distill(run: Run) -> None:
    cfg, t = run.cfg, run.cfg.section("train")
    cfg.require("run.model")
    source = load_estimator(cfg["run.model"])
    if not isinstance(source, (CRFTagger, SPENTagger)):
        raise ConfigError("run.model: distillation needs a CRF or SPEN tagger model")
    train, dev, test = _seq_splits(run)
    est = InferenceNetworkTagger(
        source, stabilizer=t["stabilizer"], weight=t["stabilizer_weight"],
        hidden_dim=cfg["model.hidden_dim"] if cfg.is_set("model.hidden_dim") else None,
        optimizer=t["optimizer"] if cfg.is_set("train.optimizer") else "adam",
        lr=t["lr"] if cfg.is_set("train.lr") else 0.005, momentum=t["momentum"],
        epochs=t["epochs"] if cfg.is_set("train.epochs") else 20, patience=t["patience"] if cfg.is_set("train.patience") else 5,
        pretrain_epochs=t["pretrain_epochs"], batch_size=t["batch_size"], tlm=_tlm(run),
        tlm_weight=cfg["model.tlm_weight"], seed=cfg["run.seed"],
    ).fit(*_xy(train), *_xy(dev), log=run.log)
    for split, ds in (("dev", dev), ("test", test)):
        if ds is None:
            continue
        _seq_scores(run, f"{split}.infnet", est.predict(ds.tokens), ds.tag_sequences)
        _seq_scores(run, f"{split}.viterbi", est.predict(ds.tokens, method="viterbi"), ds.tag_sequences)
    save_estimator(run.model_path, est, seed=cfg["run.seed"], task="seq")


def cmd_retune(run: Run) -> None:
    cfg, t = run.cfg, run.cfg.section("train")
    cfg.require("run.model")
    est = load_estimator(cfg["run.model"])
    epochs = t["retune_epochs"]
    lr = t["retune_lr"]
    if isinstance(est, SPENMultiLabelClassifier):
        key = "data.unlabeled" if cfg["data.unlabeled"] else "data.dev"
        cfg.require(key)
        X, Y = _read_mlc(run, key)
        est.psi_, before, after = retune(est.infnet_, est.energy_, X, epochs=epochs, lr=lr,
                                         batch_size=t["batch_size"], seed=cfg["run.seed"], log=run.log)
        if cfg["data.dev"]:
            Xd, Yd = _read_mlc(run, "data.dev")
            est.tau_ = tune_threshold(est.predict_proba(Xd), label_sets(Yd))
            run.report("dev.spen_f1", est.score(Xd, Yd))
    elif isinstance(est, SPENTagger):
        key = "data.unlabeled" if cfg["data.unlabeled"] else "data.dev"
        cfg.require(key)
        ds = read_conll(cfg[key])
        est.psi_, before, after = retune(est.infnet_, est.energy_, est._ids(ds.tokens), epochs=epochs, lr=lr,
                                         batch_size=t["batch_size"], seed=cfg["run.seed"], log=run.log)
        if cfg["data.dev"]:
            dev = _read_seq(run, "data.dev", est.tags_)
            _seq_scores(run, "dev.spen", est.predict(dev.tokens), dev.tag_sequences)
    else:
        raise ConfigError("run.model: retuning needs a SPEN model")
    run.report("retune.energy_before", before)
    run.report("retune.energy_after", after)
    save_estimator(run.model_path, est, seed=cfg["run.seed"], task=est.manifest_.get("task", ""))


def cmd_eval(run: Run) -> None:
    cfg = run.cfg
    cfg.require("run.model")
    est = load_estimator(cfg["run.model"])
    split = cfg["run.split"]
    key = f"data.{split}"
    cfg.require(key)
    run.report("model", type(est).__name__)
    if isinstance(est, SPENMultiLabelClassifier):
        X, Y = _read_mlc(run, key)
        run.report("tau", est.tau_)
        run.report(f"{split}.f1", est.score(X, Y))
        return
    if isinstance(est, TagLanguageModel):
        ds = _read_seq(run, key, est.tags_)
        run.report(f"{split}.perplexity", est.perplexity(ds.tag_sequences))
        return
    ds = _read_seq(run, key, est.tags_)
    _seq_scores(run, split, est.predict(ds.tokens), ds.tag_sequences)
    if isinstance(est, (InferenceNetworkTagger,)) or (isinstance(est, SPENTagger) and est.energy_ is est.chain_):
        _seq_scores(run, f"{split}.viterbi", est.predict(ds.tokens, method="viterbi"), ds.tag_sequences)


def _throughput(decode, ids, repeats: int) -> float:
    best = float("inf")
    for _ in range(max(1, repeats)):
        start = time.perf_counter()
        decode(ids)
        best = min(best, time.perf_counter() - start)
    return len(ids) / best


def bench_decoders(est, tokens, batch_size: int, repeats: int) -> dict[str, float]:
    """Examples/sec of each available decoder on already-encoded inputs (best of ``repeats``)."""
    ids = est._ids(tokens)
    out = {}
    chain = getattr(est, "chain_", getattr(est, "energy_", None))
    net = getattr(est, "net_", None) or getattr(est, "psi_", None)
    if chain is not None and hasattr(chain, "transitions"):
        out["viterbi"] = _throughput(lambda x: decode_viterbi(chain, x, batch_size), ids, repeats)
    if net is not None:
        out["infnet"] = _throughput(lambda x: decode_infnet(net, x, batch_size), ids, repeats)
    return out


def cmd_bench(run: Run) -> None:
    cfg = run.cfg
    cfg.require("run.model")
    est = load_estimator(cfg["run.model"])
    key = f"data.{cfg['run.split']}"
    cfg.require(key)
    ds = read_conll(cfg[key])
    b = cfg.section("bench")
    speeds = bench_decoders(est, ds.tokens, b["batch_size"], b["repeats"])
    run.report("measured_region", "decoding of pre-encoded token ids; excludes file reading and model loading")
    run.report("examples", len(ds))
    run.report("batch_size", b["batch_size"])
    for name, value in speeds.items():
        run.report(f"{name}.examples_per_sec", value)
    if "viterbi" in speeds and "infnet" in speeds:
        run.report("speedup", speeds["infnet"] / speeds["viterbi"])


def cmd_gen_synth(run: Run) -> None:
    cfg, s = run.cfg, run.cfg.section("synth")
    seed = cfg["run.seed"]
    if cfg["run.task"] == "mlc":
        total = s["n_train"] + s["n_dev"] + s["n_test"]
        ds = make_mlc_synthetic(total, s["n_labels"], s["n_features"], seed=seed)
        bounds = {"train": (0, s["n_train"]), "dev": (s["n_train"], s["n_train"] + s["n_dev"]), "test": (s["n_train"] + s["n_dev"], total)}
        for split, (lo, hi) in bounds.items():
            part = type(ds)(ds.features[lo:hi], ds.labels[lo:hi], ds.n_labels, ds.n_features)
            write_mlc(run.out / f"{split}.mlc", part)
            run.report(f"{split}.examples", len(part))
        return
    spec = random_hmm_spec(s["n_states"], s["n_symbols"], seed=seed)
    lengths = (s["min_length"], s["max_length"])
    for k, split in enumerate(("train", "dev", "test")):
        ds = gen_hmm(spec, s[f"n_{split}"], lengths, seed=seed * 10 + k + 1)
        write_conll(run.out / f"{split}.conll", ds)
        run.report(f"{split}.sentences", len(ds))
    table = EmbeddingTable.random(spec.token_names, s["embedding_dim"], np.random.default_rng(seed))
    write_embeddings(run.out / "embeddings.txt", table)


def cmd_export_pairwise(run: Run) -> None:
    cfg = run.cfg
    cfg.require("run.model")
    est = load_estimator(cfg["run.model"])
    chain = getattr(est, "chain_", getattr(est, "energy_", None))
    if chain is None or not hasattr(chain, "transitions"):
        raise ConfigError("run.model: model has no pairwise transition matrix")
    W = chain.transitions.data
    path = run.out / "pairwise.csv"
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("," + ",".join(est.tags_) + "\n")
        for tag, row in zip(est.tags_, W):
            fh.write(tag + "," + ",".join(repr(float(v)) for v in row) + "\n")
    run.report("pairwise", str(path))
    run.report("labels", len(est.tags_))


HANDLERS = {
    "train-spen": cmd_train_spen,
    "train-crf": cmd_train_crf,
    "train-blstm": cmd_train_blstm,
    "train-tlm": cmd_train_tlm,
    "distill": cmd_distill,
    "retune": cmd_retune,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "gen-synth": cmd_gen_synth,
    "export-pairwise": cmd_export_pairwise,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="infnet", description="SPENs trained with inference networks.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="key = value config file with [section] headers")
        p.add_argument("--seed", type=int, help="run seed (overrides run.seed)")
        p.add_argument("--override", action="append", default=[], metavar="SECTION.KEY=VALUE")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    run = None
    try:
        cfg = load_config(args.config, args.override, args.seed)
        run = Run(args.command, cfg)
        HANDLERS[args.command](run)
    except NumericError as err:
        print(f"numeric error: {err}", file=sys.stderr)
        return 2
    except (ConfigError, FormatError, ModelFileError, FileNotFoundError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1
    finally:
        if run is not None:
            run.close()
    return 0


if __name__ == "__main__":
    sys.exit(main())
