import json

import numpy as np
import pytest
from numpy.testing import assert_allclose

from attnfactor.encoder import EncoderConfig, AttentionRecord, attention_records, init_state
from attnfactor.heatmaps import AggregationError, extract_attention_heatmaps, matrix_csv, matrix_svg
from attnfactor.linear import TrainingFailure
from attnfactor.sequence import TokenSequence, collate
from attnfactor.training import (
    DESK_SPACE, SIMULATION_SPACE, TrainHyper, linear_reduction_check, random_search, sample_trial,
    train,
)


def toy_batch(n, seed, target=None):
    rng = np.random.default_rng(seed)
    seqs = []
    for _ in range(n):
        L = 4
        seqs.append(TokenSequence(rng.normal(size=L), rng.integers(0, 3, L), np.zeros(L, dtype=int),
                                  np.arange(L), 0, 3))
    y = np.full(n, 0.8) if target is None else target(seqs)
    return collate(seqs, y)


def small_cfg(**kw):
    return EncoderConfig(**{"d_model": 8, "n_head": 2, "d_ff": 8, "n_vars": 3, **kw})


def test_constant_task_learns():
    res = train(toy_batch(64, 0), toy_batch(16, 1), small_cfg(),
                TrainHyper(lr=1e-2, max_epochs=50, patience=50, batch_size=16))
    assert res.best_val < 1e-3


def test_seed_determinism():
    cfg = small_cfg(dropout=0.1)
    h = TrainHyper(lr=1e-2, max_epochs=3, seed=5)
    a = train(toy_batch(32, 0), toy_batch(8, 1), cfg, h)
    b = train(toy_batch(32, 0), toy_batch(8, 1), cfg, h)
    assert a.state.checksum() == b.state.checksum()
    c = train(toy_batch(32, 0), toy_batch(8, 1), cfg, TrainHyper(lr=1e-2, max_epochs=3, seed=6))
    assert c.state.checksum() != a.state.checksum()


def test_patience_zero_contract():
    # noisy targets so validation loss stops improving early
    rng = np.random.default_rng(3)
    tr = toy_batch(32, 0, lambda s: rng.normal(size=len(s)))
    va = toy_batch(8, 1, lambda s: rng.normal(size=len(s)))
    res = train(tr, va, small_cfg(), TrainHyper(lr=3e-2, max_epochs=40, patience=0))
    vals = [h["val_loss"] for h in res.history]
    assert res.epochs_run == len(vals) < 40
    # every epoch but the last improved; the last one is the first that did not
    assert all(b < a for a, b in zip(vals[:-2], vals[1:-1]))
    assert vals[-1] >= res.best_val
    if len(vals) > 1:
        assert res.best_val == min(vals[:-1])


def test_divergence_raises():
    with pytest.raises(TrainingFailure, match="epoch"):
        train(toy_batch(16, 0, lambda s: np.full(len(s), 1e200)), toy_batch(4, 1), small_cfg(),
              TrainHyper(lr=1e6, max_epochs=5, optimizer="sgd", grad_clip=None))


def test_random_search_contracts(tmp_path):
    calls = []

    def obj(h, s):
        calls.append(s)
        return float(h["lr"])

    one = random_search({"lr": [0.5]}, 3, 0, obj)
    assert one.best == {"lr": 0.5}
    r = random_search(SIMULATION_SPACE, 1, 1, obj)
    assert r.best == sample_trial(SIMULATION_SPACE, 1, 0)
    log = tmp_path / "trials.jsonl"
    r = random_search(SIMULATION_SPACE, 20, 2, obj, log)
    lines = [json.loads(l) for l in log.read_text().splitlines()]
    assert len(lines) == 20 and len({l["seed"] for l in lines}) == 20
    assert r.best_loss == min(l["val_loss"] for l in lines)
    with pytest.raises(ValueError):
        random_search(DESK_SPACE, 0, 0, obj)


def test_trial_draws_are_valid_configs():
    for i in range(50):
        h = sample_trial(SIMULATION_SPACE, 9, i)
        assert h["d_model"] % h["n_head"] == 0


def test_failed_trial_scores_inf():
    def obj(h, s):
        raise TrainingFailure("boom")

    r = random_search({"lr": [1.0, 2.0]}, 2, 0, obj)
    assert r.best_loss == np.inf and r.trials[0]["status"].startswith("failed")


def rank_dominant(seed=0):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(100, 3)) @ np.diag([5.0, 4.0, 3.0]) @ rng.normal(size=(3, 20))
    return z + 0.3 * rng.normal(size=(100, 20))


def test_linear_reduction_check():
    z = rank_dominant()
    assert linear_reduction_check(z, 3, init="closed_form").angle < 1e-10
    assert linear_reduction_check(z, 3, seed=1).angle < 0.05
    assert linear_reduction_check(z[:, :5], 5, seed=1, max_iter=10).angle < 1e-10


# -- heatmaps --------------------------------------------------------------

def test_uniform_records_give_uniform_maps():
    rec = AttentionRecord([np.full((2, 4, 4), 0.25)], np.array([0, 1, 0, 1]), np.array([1, 1, 0, 0]))
    hm = extract_attention_heatmaps([rec])
    assert_allclose(hm.variable_matrix, 0.5)
    assert_allclose(hm.temporal_matrix, 0.5)


def test_toy_hand_aggregation():
    w = np.array([[[1.0, 0.0], [0.5, 0.5]]])
    rec = AttentionRecord([w], np.array([0, 1]), np.array([1, 0]))
    hm = extract_attention_heatmaps([rec])
    assert_allclose(hm.variable_matrix, [[1, 0], [0.5, 0.5]])
    # lag of token 0 is 1, token 1 is 0
    assert_allclose(hm.temporal_matrix, [[0.5, 0.5], [0, 1]])
    # two records average cell by cell before normalizing
    rec2 = AttentionRecord([np.array([[[0.0, 1.0], [1.0, 0.0]]])], np.array([0, 1]), np.array([1, 0]))
    hm2 = extract_attention_heatmaps([rec, rec2])
    assert_allclose(hm2.variable_matrix, [[0.5, 0.5], [0.75, 0.25]])


def test_no_attention_flag_and_errors():
    rec = AttentionRecord(None, np.array([0, 1]), np.array([0, 0]))
    hm = extract_attention_heatmaps([rec])
    assert hm.no_attention and hm.variable_matrix is None
    with pytest.raises(AggregationError):
        extract_attention_heatmaps([])
    good = AttentionRecord([np.eye(2)[None]], np.array([0, 1]), np.array([0, 0]))
    with pytest.raises(AggregationError):
        extract_attention_heatmaps([good, rec])
    with pytest.raises(AggregationError):
        extract_attention_heatmaps([good], n_vars=1)


def test_records_from_model_rows_stochastic():
    st = init_state(small_cfg(n_layers=2), 0)
    recs = attention_records(toy_batch(5, 0), st)
    assert len(recs) == 5
    for r in recs:
        for w in r.weights:
            assert_allclose(w.sum(-1), 1.0, atol=1e-12)
    hm = extract_attention_heatmaps(recs, n_vars=3, window=4)
    assert hm.variable_matrix.shape == (3, 3) and hm.temporal_matrix.shape == (4, 4)


def test_csv_and_svg():
    m = np.array([[0.2, 0.8], [1.0, 0.0], [0.5, 0.5]])
    text = matrix_csv(m, ["a", "b", "c"], ["x", "y"])
    assert text.splitlines()[0] == ",x,y" and len(text.splitlines()) == 4
    svg = matrix_svg(m, cell=10)
    assert 'data-rows="3"' in svg and 'data-cols="2"' in svg
    assert svg.count("<rect") == 6 and 'width="20"' in svg and 'height="30"' in svg
