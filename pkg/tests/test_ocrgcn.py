import random
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from provsentinel.features import encode_graph
from provsentinel.graph_store import ingest_events
from provsentinel.ocrgcn import (
    DegenerateModelWarning,
    Hypersphere,
    ModelError,
    OCRGCNDetector,
    RgcnParams,
    TrainingConfig,
    TypeModel,
    _excess_scores,
    detect_anomalies,
    estimate_contamination,
    fit_type_model,
    init_params,
    loss_and_grad,
    rgcn_forward,
    score_embeddings,
    score_nodes,
)

import oracles
from conftest import benign_graph, ev, graph_of, random_graph


@pytest.fixture(scope="module")
def small_benign():
    return benign_graph()


@pytest.fixture(scope="module")
def fitted(small_benign):
    return OCRGCNDetector(max_epochs=30, hidden_dim=16, random_state=0).fit(small_benign)


def test_zero_weights_give_zero_embeddings(rng):
    g, _ = random_graph(rng, 12, 30)
    enc = encode_graph(g)
    params = init_params(enc.n_relations, enc.features.shape[1], 8, 2, 0)
    params = RgcnParams([np.zeros_like(w) for w in params.weights], [np.zeros_like(b) for b in params.biases])
    assert not rgcn_forward(params, enc).any()


def test_identity_case():
    g = ingest_events([ev("P1", "fork", "P1", 5)])
    enc = encode_graph(g)
    d = enc.features.shape[1]
    w = np.zeros((enc.n_relations, d, d))
    w[-1] = np.eye(d)  # self relation only
    out = rgcn_forward(RgcnParams([w], [np.zeros(d)]), enc)
    np.testing.assert_array_equal(out, enc.features)


@given(st.integers(0, 10_000))
def test_forward_matches_dense_oracle(seed):
    r = random.Random(seed)
    g = graph_of([(f"P{r.randrange(5)}", r.choice(["read", "write"]), f"P{r.randrange(5)}", k) for k in range(9)])
    enc = encode_graph(g)
    params = init_params(enc.n_relations, enc.features.shape[1], 6, 3, seed)
    mats = oracles.dense_relations(g, enc.edge_vocab)
    want = oracles.dense_forward(params.weights, params.biases, enc.features, mats)
    np.testing.assert_allclose(rgcn_forward(params, enc), want, atol=1e-10)


def test_forward_dimension_mismatch(rng):
    g, _ = random_graph(rng, 10, 20)
    enc = encode_graph(g)
    params = init_params(enc.n_relations + 1, enc.features.shape[1], 4, 1, 0)
    with pytest.raises(ModelError, match="relations"):
        rgcn_forward(params, enc)


@pytest.mark.parametrize("seed", range(3))
def test_gradients_match_finite_differences(seed):
    rng = np.random.default_rng(seed)
    enc = oracles.random_encoded(rng)
    params = init_params(enc.n_relations, enc.features.shape[1], 5, 3, rng)
    rows = np.arange(10)
    center, radius, beta = rng.normal(size=5) * 0.1, 0.2, 0.5

    def loss():
        emb = oracles.dense_forward(params.weights, params.biases, enc.features, [a.toarray() for a in enc.relations])
        return oracles.soft_boundary_loss(emb, center, radius, beta)

    value, grads = loss_and_grad(params, enc, rows, center, radius, beta)
    assert value == pytest.approx(loss(), rel=1e-12)
    for k in range(params.n_layers):
        assert oracles.rel_error(grads.weights[k], oracles.numeric_grad(loss, params.weights[k])) <= 1e-4
        assert oracles.rel_error(grads.biases[k], oracles.numeric_grad(loss, params.biases[k])) <= 1e-4


def test_estimate_contamination_examples():
    assert estimate_contamination([0] * 1000) == 0.001
    assert estimate_contamination([1] * 100 + [0] * 900) == 0.05
    assert estimate_contamination([1] * 2 + [0] * 98) == pytest.approx(0.02)
    assert estimate_contamination(None) == 0.001


def test_training_config_validation():
    with pytest.raises(ValueError):
        TrainingConfig(beta=1.0)
    with pytest.raises(ValueError):
        TrainingConfig(min_con=0.1, max_con=0.05)


def test_score_examples():
    sphere = Hypersphere(np.zeros(2), 1.0, 0.0)
    assert score_embeddings([0.0, 0.0], sphere)[0] == 0.0
    assert score_embeddings([1.0, 0.0], sphere)[0] == 0.0
    assert score_embeddings([np.sqrt(8.5), 0.0], sphere)[0] == pytest.approx(7.5)


@given(st.integers(0, 10_000))
def test_scores_translation_consistent(seed):
    rng = np.random.default_rng(seed)
    emb = rng.normal(size=(20, 4))
    center, shift = rng.normal(size=4), rng.normal(size=4) * 3
    a = _excess_scores(emb, center, 0.7)
    b = _excess_scores(emb + shift, center + shift, 0.7)
    np.testing.assert_allclose(a, b, atol=1e-9)


def test_degenerate_single_node_type():
    g = graph_of([("P1", "read", "F1"), ("P2", "read", "F1")])
    enc = encode_graph(g)
    with pytest.warns(DegenerateModelWarning):
        model = fit_type_model(enc, "FILE", TrainingConfig(max_epochs=3))
    assert model.degenerate and model.sphere.radius == 0 and model.sphere.threshold == 0


def test_identical_embeddings_collapse():
    g = graph_of([(f"P{k}", "read", f"F{k}", 0) for k in range(6)])
    enc = encode_graph(g)
    model = fit_type_model(enc, "PROCESS", TrainingConfig(max_epochs=5, hidden_dim=4))
    assert model.sphere.radius == pytest.approx(0.0, abs=1e-12)
    assert model.sphere.threshold == pytest.approx(0.0, abs=1e-12)
    assert all(s == pytest.approx(0.0, abs=1e-12) for s in score_nodes(model, enc).values())


def test_threshold_and_beta_properties(small_benign):
    enc = encode_graph(small_benign)
    for c in (0.001, 0.02, 0.05):
        cfg = TrainingConfig(max_epochs=20, hidden_dim=16, min_con=c, max_con=max(c, 0.05))
        model = fit_type_model(enc, "FILE", cfg)
        scores = np.array(list(score_nodes(model, enc).values()))
        n = scores.size
        assert np.mean(scores > model.sphere.threshold) <= c + 1 / n
        emb = rgcn_forward(model.params, enc, "FILE")
        dist = np.linalg.norm(emb - model.sphere.center, axis=1)
        assert abs(np.mean(dist > model.sphere.radius) - cfg.beta) <= 0.1


def test_detect_thresholds_infinite_and_missing_type(small_benign, caplog):
    enc = encode_graph(small_benign)
    model = fit_type_model(enc, "PROCESS", TrainingConfig(max_epochs=5, hidden_dim=8))
    inf = TypeModel("PROCESS", model.params, Hypersphere(model.sphere.center, model.sphere.radius, np.inf), 0.001, enc.scaler)
    with caplog.at_level("WARNING"):
        assert detect_anomalies({"PROCESS": inf}, enc) == {}
    assert "no model for node type" in caplog.text


def test_training_graph_flag_rate(fitted, small_benign):
    flagged = fitted.detect(small_benign)
    for t in small_benign.type_vocab:
        nodes = small_benign.nodes_of_type(t)
        share = sum(n in flagged for n in nodes) / len(nodes)
        assert share <= fitted.models_[t].contamination + 1 / len(nodes)
    assert all(np.isfinite(v) for v in fitted.thresholds_.values())


def test_planted_outliers_flagged(fitted, small_benign):
    enc = fitted.encode(small_benign)
    std = enc.features.std(axis=0)
    for t in ("PROCESS", "FILE", "IP"):
        rows = enc.type_index[t][:3]
        enc.features[rows] = enc.features[rows] + 10 * std
        planted = {enc.node_ids[i] for i in rows}
        assert planted <= set(detect_anomalies(fitted.models_, enc))


def test_estimator_arrays_align(fitted, small_benign):
    scores = fitted.decision_function(small_benign)
    preds = fitted.predict(small_benign)
    assert scores.shape == preds.shape == (small_benign.n_nodes,)
    flagged = fitted.detect(small_benign)
    assert {n for n, p in zip(small_benign.node_ids, preds) if p} == set(flagged)


def test_permutation_equivariance(small_benign, fitted):
    events = [ev(e.src, e.action, e.dst, e.timestamp_us) for e in small_benign.edges()]
    shuffled = events[:]
    random.Random(5).shuffle(shuffled)
    a = fitted.score_samples(ingest_events(events))
    b = fitted.score_samples(ingest_events(shuffled))
    assert a.keys() == b.keys()
    for n in a:
        assert a[n] == pytest.approx(b[n], rel=1e-9, abs=1e-9)


def test_type_isolation(fitted):
    base = [("P1", "read", "F1", 0), ("P1", "write", "F2", 5_000_000), ("P2", "read", "F1", 9_000_000)]
    with_ips = base + [("I1", "connect", "I2", 1), ("I2", "send", "I1", 2)]
    det = OCRGCNDetector(max_epochs=3, hidden_dim=4).fit(graph_of(with_ips))
    a = det.score_samples(graph_of(with_ips))
    saved = det.models_.pop("IP")
    b = det.score_samples(graph_of(base))
    det.models_["IP"] = saved
    assert {n: a[n] for n in b} == pytest.approx(b)


def test_snapshot_round_trip_and_determinism(tmp_path, small_benign, fitted):
    fitted.save(tmp_path / "m1")
    again = OCRGCNDetector(max_epochs=30, hidden_dim=16, random_state=0).fit(small_benign)
    again.save(tmp_path / "m2")
    assert (tmp_path / "m1").read_bytes() == (tmp_path / "m2").read_bytes()
    loaded = OCRGCNDetector.load(tmp_path / "m1")
    assert loaded.score_samples(small_benign) == fitted.score_samples(small_benign)
    assert loaded.get_params() == fitted.get_params()


def test_snapshot_errors(tmp_path, fitted):
    raw = fitted.to_bytes()
    (tmp_path / "cut").write_bytes(raw[: len(raw) // 3])
    with pytest.raises(ModelError, match="corrupted"):
        OCRGCNDetector.load(tmp_path / "cut")
    (tmp_path / "v2").write_bytes(b"PROVSENTINEL-MODEL-v2\n{}")
    with pytest.raises(ModelError, match="unsupported"):
        OCRGCNDetector.load(tmp_path / "v2")
    (tmp_path / "junk").write_bytes(b"{}")
    with pytest.raises(ModelError):
        OCRGCNDetector.load(tmp_path / "junk")


def test_unseen_action_at_inference(fitted):
    with pytest.raises(Exception, match="training vocabulary"):
        fitted.score_samples(graph_of([("P1", "teleport", "F1")]))


def test_early_stopping_with_validation_labels(small_benign):
    enc = encode_graph(small_benign)
    val_ids = small_benign.nodes_of_type("PROCESS")[:5]
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        model = fit_type_model(enc, "PROCESS", TrainingConfig(max_epochs=15, patience=3, hidden_dim=8), (enc, val_ids))
    assert model.contamination == pytest.approx(0.05)
    assert 1 <= len(model.loss_history) <= 15
