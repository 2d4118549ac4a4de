import itertools

import numpy as np
import pytest
from numpy.testing import assert_allclose

from attnfactor.encoder import (
    EmbeddingTables, EncoderConfig, NumericalFailure, embed_tokens, encoder_forward, forward,
    init_state, layer_norm, load_checkpoint, loss_and_gradients, predict, save_checkpoint,
)
from attnfactor.sequence import Ablations, TokenSequence, collate, temporal_encoding
from attnfactor.training import gradient_check


def seq(n=5, n_vars=4, seed=0, low_only=False):
    rng = np.random.default_rng(seed)
    v = rng.integers(0, n_vars, n)
    f = np.ones(n, dtype=int) if low_only else (v >= n_vars - 1).astype(int)
    return TokenSequence(rng.normal(size=n), v, f, np.sort(rng.integers(0, 6, n)), 0, 6)


def cfg(**kw):
    base = dict(d_model=8, n_head=2, n_layers=2, d_ff=6, n_vars=4)
    base.update(kw)
    return EncoderConfig(**base)


def test_config_validation():
    with pytest.raises(ValueError):
        cfg(d_model=10, n_head=4)
    with pytest.raises(ValueError):
        cfg(dropout=1.0)
    with pytest.raises(ValueError):
        cfg(activation="tanh")
    c = cfg(n_vars=25)
    assert c.d_var == 7 and c.d_freq == 3 and c.d_in == 11
    assert cfg(ablations="AB1").effective_activation == "identity"


def test_embedding_examples():
    c = cfg()
    s = seq()
    zero = EmbeddingTables(np.zeros((4, c.d_var)), np.zeros((2, c.d_freq)), np.zeros((8, c.d_in)))
    assert_allclose(embed_tokens(s, zero, c), temporal_encoding(s.timestamps - s.start, 8))
    c4 = cfg(ablations=Ablations(no_temporal_encoding=True))
    assert np.all(embed_tokens(s, zero, c4) == 0)
    # single token with a hand-set 2 x 4 projection (d_var = d_freq = 1 + ... trimmed below)
    c2 = EncoderConfig(d_model=2, n_head=1, n_vars=1, n_freqs=1, d_var=2, d_freq=1,
                       ablations=Ablations(no_temporal_encoding=True))
    one = TokenSequence(np.array([2.0]), np.array([0]), np.array([0]), np.array([0]), 0, 0)
    W = np.array([[1.0, 0.0, 2.0, -1.0], [0.5, 1.0, 0.0, 3.0]])
    tab = EmbeddingTables(np.array([[0.3, -0.2]]), np.array([[0.1]]), W)
    phi = np.array([2.0, 0.3, -0.2, 0.1])
    assert_allclose(embed_tokens(one, tab, c2)[0], W @ phi)
    with pytest.raises(IndexError):
        embed_tokens(TokenSequence(np.ones(1), np.array([9]), np.array([0]), np.array([0]), 0, 0), tab, c2)


def test_ab3_zero_weights_gives_normalized_input():
    c = cfg(n_layers=1, ablations="AB3")
    st = init_state(c)
    st.params["l0.W1"][:] = 0
    st.params["l0.W2"][:] = 0
    Z = np.random.default_rng(1).normal(size=(5, 8))
    out, rec = encoder_forward(Z, c, st)
    assert rec.weights is None
    assert_allclose(out, layer_norm(Z, 1.0, 0.0)[0])


def test_attention_rows_and_uniform_input():
    c = cfg(n_layers=3)
    st = init_state(c, 2)
    Z = np.random.default_rng(2).normal(size=(7, 8))
    for mode in ("eval", "train"):
        _, rec = encoder_forward(Z, c, st, mode, rng=np.random.default_rng(0))
        for w in rec.weights:
            assert_allclose(w.sum(axis=-1), 1.0, atol=1e-12)
    _, rec = encoder_forward(np.tile(Z[:1], (7, 1)), c, st)
    for w in rec.weights:
        assert_allclose(w, 1.0 / 7, atol=1e-15)


def test_non_finite_names_layer():
    c = cfg(n_layers=2)
    st = init_state(c)
    st.params["l1.W2"][0, 0] = np.inf
    with pytest.raises(NumericalFailure, match="layer 1"):
        encoder_forward(np.ones((3, 8)) + np.arange(8), c, st)


def test_predict_examples():
    enc = np.random.default_rng(3).normal(size=(4, 3))
    assert predict(enc, {"w_head": np.zeros(3), "b_head": 0.7}) == 0.7
    const = np.tile([1.0, -2.0, 0.5], (4, 1))
    head = {"w_head": np.array([0.2, 0.1, -1.0]), "b_head": 0.3}
    assert predict(const, head, "mean") == pytest.approx(predict(const, head, "last"), abs=1e-15)
    assert predict(const, head) == pytest.approx(0.2 - 0.2 - 0.5 + 0.3)
    assert predict(enc, head, "last") == pytest.approx(enc[-1] @ head["w_head"] + 0.3)


def test_loss_examples():
    c = cfg()
    st = init_state(c, 4)
    batch = collate([seq(seed=i) for i in range(3)], np.zeros(3))
    pred, _ = forward(batch, st)
    batch.targets = pred.copy()
    loss, g = loss_and_gradients(batch, st, "eval")
    assert loss == 0.0 and np.all(g["w_head"] == 0) and g["b_head"] == 0
    batch.targets = pred + np.array([0.1, -0.2, 0.3])
    l1, _ = loss_and_gradients(batch, st, "eval")
    batch.targets = pred + 2 * np.array([0.1, -0.2, 0.3])
    l2, _ = loss_and_gradients(batch, st, "eval")
    assert l2 == pytest.approx(4 * l1, rel=1e-12)
    with pytest.raises(ValueError):
        loss_and_gradients(collate([seq()]), st)


def test_permutation_of_ties():
    c = cfg(n_layers=2)
    st = init_state(c, 5)
    s = TokenSequence(np.array([0.3, -1.0, 2.0, 0.5]), np.array([0, 1, 2, 3]), np.array([0, 0, 0, 1]),
                      np.array([1, 4, 4, 4]), 0, 4)
    p = TokenSequence(s.values[[0, 3, 1, 2]], s.variable_ids[[0, 3, 1, 2]], s.frequencies[[0, 3, 1, 2]],
                      s.timestamps[[0, 3, 1, 2]], 0, 4)
    a, _ = forward(collate([s]), st)
    b, _ = forward(collate([p]), st)
    assert_allclose(a, b, atol=1e-13)


def test_dropout_modes():
    batch = collate([seq(seed=i) for i in range(2)])
    st = init_state(cfg(dropout=0.0), 6)
    a = forward(batch, st, "eval")[0]
    assert np.array_equal(a, forward(batch, st, "eval")[0])
    assert_allclose(forward(batch, st, "train", np.random.default_rng(1))[0], a, atol=0)
    st2 = init_state(cfg(dropout=0.3), 6)
    assert not np.allclose(forward(batch, st2, "train", np.random.default_rng(1))[0], forward(batch, st2, "eval")[0])


def test_ab3_affine_without_norm():
    c = cfg(ablations="AB3", norm=False)
    st = init_state(c, 7)
    s = seq(n=6)

    def pooled(vals):
        b = collate([TokenSequence(vals, s.variable_ids, s.frequencies, s.timestamps, 0, 6)])
        return forward(b, st)[1]["pooled"][0]

    f0, f1, f2 = pooled(np.zeros(6)), pooled(s.values), pooled(2 * s.values)
    assert_allclose(f2 - f0, 2 * (f1 - f0), atol=1e-12)


def test_padding_does_not_leak():
    c = cfg()
    st = init_state(c, 8)
    a, b = seq(n=6, seed=1), seq(n=3, seed=2)
    alone = forward(collate([b]), st)[0]
    padded = forward(collate([a, b]), st)[0]
    assert_allclose(padded[1], alone[0], atol=1e-13)


@pytest.mark.parametrize("combo", list(itertools.product([False, True], repeat=4)))
def test_gradients_all_variants(combo):
    ab = Ablations(*combo)
    c = cfg(activation="gelu" if combo[0] else "relu", ablations=ab, dropout=0.2)
    st = init_state(c, 9)
    rng = np.random.default_rng(10)
    for k in st.params:
        st.params[k] = np.asarray(st.params[k] + 0.3 * rng.normal(size=st.params[k].shape))
    batch = collate([seq(n=n, seed=n, low_only=ab.low_freq_only) for n in (6, 4, 3)], rng.normal(size=3))
    out = gradient_check(batch, st, n_params=40, seed=1)
    assert out["max_rel_error"] < 1e-4
    assert out["key_bias_abs_grad"] < 1e-12


def test_checkpoint_round_trip(tmp_path):
    st = init_state(cfg(ablations="AB4"), 11)
    save_checkpoint(st, tmp_path / "m.ckpt", {"note": "x"})
    back = load_checkpoint(tmp_path / "m.ckpt")
    assert back.checksum() == st.checksum()
    assert back.config == st.config
    text = (tmp_path / "m.ckpt").read_text().replace("# w_head\n", "# w_head\n9,")
    (tmp_path / "bad.ckpt").write_text(text)
    with pytest.raises(Exception):
        load_checkpoint(tmp_path / "bad.ckpt")
