import numpy as np
import pytest
from sklearn.base import clone

from infnet import (
    BLSTMTagger,
    CRFTagger,
    InferenceNetworkTagger,
    MLPMultiLabelClassifier,
    SPENMultiLabelClassifier,
    SPENTagger,
    TagLanguageModel,
    load_estimator,
    save_estimator,
)
from infnet.data import gen_hmm, make_mlc_synthetic, random_hmm_spec
from infnet.energies import one_hot

SMALL = dict(hidden_dim=6, embedding_dim=4, batch_size=8, seed=0)


@pytest.fixture(scope="module")
def seq_data():
    spec = random_hmm_spec(n_states=4, n_symbols=12, seed=1)
    train, dev = gen_hmm(spec, 48, (3, 6), seed=2), gen_hmm(spec, 16, (3, 6), seed=3)
    return train.tokens, train.tag_sequences, dev.tokens, dev.tag_sequences


@pytest.fixture(scope="module")
def mlc_data():
    ds = make_mlc_synthetic(80, n_labels=5, n_features=10, seed=0)
    X, Y = ds.dense(), ds.label_matrix()
    return X[:60], Y[:60], X[60:], Y[60:]


@pytest.fixture(scope="module")
def crf(seq_data):
    X, y, Xd, yd = seq_data
    return CRFTagger(epochs=3, **SMALL).fit(X, y, Xd, yd)


@pytest.fixture(scope="module")
def tlm(seq_data):
    _, y, _, yd = seq_data
    return TagLanguageModel(hidden_dim=5, epochs=2, batch_size=8).fit(y, yd)


def test_get_params_and_clone():
    est = SPENTagger(hidden_dim=7, hinge="contrastive")
    params = est.get_params()
    assert params["hidden_dim"] == 7 and params["hinge"] == "contrastive"
    copy = clone(est)
    assert copy.get_params() == params and copy is not est
    assert clone(CRFTagger(lr=0.1)).lr == 0.1


def test_fit_leaves_constructor_params_alone(seq_data, tlm):
    X, y, _, _ = seq_data
    est = SPENTagger(epochs=1, tlm=tlm, tlm_weight=0.1, **SMALL)
    before = est.get_params()
    est.fit(X, y)
    assert est.get_params() == before


def assert_same_predictions(est, back, X, **kwargs):
    assert back.predict(X, **kwargs) == est.predict(X, **kwargs)


def test_crf_tagger_round_trip(crf, seq_data, tmp_path):
    _, _, Xd, yd = seq_data
    save_estimator(tmp_path / "m.bin", crf, seed=0)
    back = load_estimator(tmp_path / "m.bin")
    assert back.energy_.param_hash() == crf.energy_.param_hash()
    assert_same_predictions(crf, back, Xd)
    assert back.score(Xd, yd) == crf.score(Xd, yd)
    assert back.pairwise().shape == (4, 4)
    assert back.manifest_["seed"] == 0


def test_blstm_tagger_round_trip(seq_data, tmp_path):
    X, y, Xd, yd = seq_data
    est = BLSTMTagger(epochs=2, **SMALL).fit(X, y, Xd, yd)
    probs = est.predict_proba(Xd[:3])
    assert all(np.allclose(p.sum(-1), 1.0) for p in probs)
    save_estimator(tmp_path / "m.bin", est)
    assert_same_predictions(est, load_estimator(tmp_path / "m.bin"), Xd)


def test_tag_language_model_round_trip(tlm, seq_data, tmp_path):
    _, _, _, yd = seq_data
    save_estimator(tmp_path / "m.bin", tlm)
    back = load_estimator(tmp_path / "m.bin")
    assert back.perplexity(yd) == tlm.perplexity(yd)
    tags = yd[0]
    energy = tlm.energy().energy(None, one_hot([tlm.tag_index_[t] for t in tags], len(tlm.tags_))).item()
    assert energy == pytest.approx(tlm.nll(tags), abs=1e-9)


def test_spen_tagger_round_trip(seq_data, tmp_path):
    X, y, Xd, yd = seq_data
    est = SPENTagger(epochs=2, retune_epochs=1, retune_lr=1e-3, **SMALL).fit(X, y, Xd, yd)
    assert est.energy_after_retune_ <= est.energy_before_retune_
    save_estimator(tmp_path / "m.bin", est)
    back = load_estimator(tmp_path / "m.bin")
    assert_same_predictions(est, back, Xd)
    assert_same_predictions(est, back, Xd, method="viterbi")


def test_spen_tagger_with_tlm_round_trip(seq_data, tlm, tmp_path):
    X, y, Xd, _ = seq_data
    h = tlm.cell_.param_hash()
    est = SPENTagger(epochs=1, tlm=tlm, tlm_weight=0.2, **SMALL).fit(X, y)
    assert tlm.cell_.param_hash() == h
    with pytest.raises(ValueError, match="tag language model"):
        est.predict(Xd, method="viterbi")
    save_estimator(tmp_path / "m.bin", est)
    assert_same_predictions(est, load_estimator(tmp_path / "m.bin"), Xd)


def test_inference_network_tagger(crf, seq_data, tmp_path):
    X, y, Xd, yd = seq_data
    h = crf.energy_.param_hash()
    est = InferenceNetworkTagger(crf, epochs=2, batch_size=8).fit(X, y, Xd, yd)
    assert crf.energy_.param_hash() == h
    assert est.predict(Xd, method="viterbi") == crf.predict(Xd)
    save_estimator(tmp_path / "m.bin", est)
    back = load_estimator(tmp_path / "m.bin")
    assert_same_predictions(est, back, Xd)
    assert_same_predictions(est, back, Xd, method="viterbi")


def test_inference_network_tagger_l2_stabilizer(crf, seq_data):
    X, y, _, _ = seq_data
    est = InferenceNetworkTagger(crf, stabilizer="l2", weight=0.1, epochs=1, pretrain_epochs=1, batch_size=8)
    est.fit(X, y)
    assert len(est.predict(X[:2])[0]) == len(X[0])


def test_inference_network_needs_energy_model(seq_data):
    X, y, _, _ = seq_data
    with pytest.raises(ValueError):
        InferenceNetworkTagger().fit(X, y)


def test_unknown_tags_are_rejected(crf, seq_data):
    X, y, _, _ = seq_data
    bad = [list(t) for t in y]
    bad[0][0] = "NOPE"
    with pytest.raises(ValueError, match="NOPE"):
        CRFTagger(tags=crf.tags_, epochs=1, **SMALL).fit(X, bad)


def test_tagger_input_validation(crf):
    with pytest.raises(ValueError):
        crf.predict([[]])
    with pytest.raises(ValueError):
        crf.score([["w0", "w1"]], [["T0"]])


def test_mlp_classifier_round_trip(mlc_data, tmp_path):
    X, Y, Xd, Yd = mlc_data
    est = MLPMultiLabelClassifier(hidden=(8,), epochs=3).fit(X, Y, Xd, Yd)
    assert 0.0 <= est.score(Xd, Yd) <= 1.0
    save_estimator(tmp_path / "m.bin", est)
    back = load_estimator(tmp_path / "m.bin")
    np.testing.assert_array_equal(back.predict_proba(Xd), est.predict_proba(Xd))
    assert back.tau_ == est.tau_


def test_spen_classifier_fit_and_round_trip(mlc_data, tmp_path):
    X, Y, Xd, Yd = mlc_data
    est = SPENMultiLabelClassifier(hidden=(8, 8), epochs=2, pretrain_epochs=2, retune_epochs=2, batch_size=16)
    est.fit(X, Y, Xd, Yd)
    assert est.energy_after_retune_ <= est.energy_before_retune_
    assert est.feature_net_.param_hash() == est.energy_.feature_net.param_hash()
    proba = est.predict_proba(Xd)
    assert proba.shape == Yd.shape and np.all((proba > 0) & (proba < 1))
    assert est.energy(Xd[:3], Yd[:3]).shape == (3,)
    save_estimator(tmp_path / "m.bin", est)
    back = load_estimator(tmp_path / "m.bin")
    np.testing.assert_array_equal(back.predict_proba(Xd), proba)
    np.testing.assert_array_equal(back.predict_proba(Xd, network="phi"), est.predict_proba(Xd, network="phi"))
    assert back.score(Xd, Yd) == est.score(Xd, Yd)


def test_spen_classifier_uses_stored_threshold(mlc_data, tmp_path):
    X, Y, Xd, Yd = mlc_data
    est = SPENMultiLabelClassifier(hidden=(8, 8), epochs=1, pretrain_epochs=1, retune_epochs=0, tau=0.25)
    est.fit(X, Y, Xd, Yd)
    assert est.tau_ == 0.25
    save_estimator(tmp_path / "m.bin", est)
    back = load_estimator(tmp_path / "m.bin")
    assert back.manifest_["architecture"]["tau"] == 0.25 and back.tau_ == 0.25
    np.testing.assert_array_equal(back.predict(Xd), (est.predict_proba(Xd) > 0.25).astype(int))


def test_multilabel_validation(mlc_data):
    X, Y, _, _ = mlc_data
    with pytest.raises(ValueError):
        MLPMultiLabelClassifier(epochs=1).fit(X, Y * 2)
    est = MLPMultiLabelClassifier(hidden=(4,), epochs=1).fit(X, Y)
    with pytest.raises(ValueError):
        est.predict(X[:, :3])
