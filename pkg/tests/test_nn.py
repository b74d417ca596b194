import numpy as np
import pytest

from gmdiff import nn
from gmdiff.autodiff import Graph, backward


@pytest.fixture(scope="module")
def params():
    return nn.init_params(nn.generator_manifest(), seed=11)


@pytest.fixture(scope="module")
def rng():
    return np.random.default_rng(0)


def test_parameter_budget():
    assert nn.param_count(nn.generator_manifest()) < nn.PARAM_BUDGET


def test_vocabulary_basics():
    v = nn.Vocabulary.default()
    assert len(v) == nn.V
    assert v.words[0] == nn.PAD_WORD
    ids = v.encode_prompt("a red circle in forest")
    assert ids.shape == (8,)
    assert list(ids[5:]) == [0, 0, 0]
    assert v.decode(ids) == ["a", "red", "circle", "in", "forest"]
    with pytest.raises(ValueError, match="unknown token"):
        v.encode_prompt("a purple circle in forest")
    with pytest.raises(ValueError, match="words"):
        v.encode_prompt("a a a a a a a a a")


def test_encode_contract(params, rng):
    img = rng.uniform(0, 1, (3, 32, 32))
    z1 = nn.encode(params, img)
    z2 = nn.encode(params, img)
    assert z1.shape == (4, 8, 8)
    assert np.array_equal(z1, z2)
    with pytest.raises(ValueError):
        nn.encode(params, np.zeros((3, 16, 16)))
    with pytest.raises(ValueError):
        nn.encode(params, img + 10.0)


def test_decode_contract(params, rng):
    z = rng.normal(size=(4, 8, 8))
    x = nn.decode(params, z)
    assert x.shape == (3, 32, 32)
    assert x.min() >= 0.0 and x.max() <= 1.0
    with pytest.raises(ValueError):
        nn.decode(params, np.zeros((4, 4, 4)))


def test_decode_zero_latent_is_constant_image(params):
    x = nn.decode(params, np.zeros((4, 8, 8)))
    for c in range(3):
        assert np.ptp(x[c]) == 0.0, f"channel {c} not constant"


def test_embed_tokens_contract(params):
    ids = np.array([1, 3, 3, 2, 9, 0, 0, 0])
    emb = nn.embed_tokens(params, ids)
    assert emb.shape == (8, 16)
    np.testing.assert_array_equal(emb[1], emb[2])
    with pytest.raises(ValueError):
        nn.embed_tokens(params, np.array([0, 1, 2, 3, 4, 5, 6, 99]))


def test_embedding_gradient_touches_only_looked_up_rows(params):
    g = Graph()
    table = g.input(params["text.embed"])
    ids = np.array([[1, 3, 6, 2, 9, 0, 0, 0]])
    emb = g.op("embed_lookup", table, ids=ids)
    loss = g.op("mean", g.op("mul", emb, emb), axis=None)
    grads = backward(g, loss, np.asarray(1.0))
    gt = grads[table]
    used = set(ids.ravel().tolist())
    for row in range(nn.V):
        if row in used:
            assert np.abs(gt[row]).max() > 0
        else:
            assert np.abs(gt[row]).max() == 0.0, f"untouched row {row} has gradient"


def test_unet_forward_records_contract(params, rng):
    z = rng.normal(size=(4, 8, 8))
    text = nn.embed_tokens(params, np.array([1, 4, 7, 2, 10, 0, 0, 0]))
    g = Graph()
    out = nn.unet_forward(g, params, z, 42, text)
    assert out.eps_hat.shape == (4, 8, 8)
    assert len(out.records) == 2
    assert {r.grid for r in out.records} == {8, 4}
    for r in out.records:
        assert r.weights.shape == (r.heads, r.grid ** 2, r.tokens)
        assert (r.weights >= 0).all()
        np.testing.assert_allclose(r.weights.sum(axis=-1), 1.0, rtol=0, atol=1e-9)


def test_unet_forward_is_pure(params, rng):
    z = rng.normal(size=(4, 8, 8))
    text = nn.embed_tokens(params, np.array([1, 4, 7, 2, 10, 0, 0, 0]))
    outs = [nn.unet_forward(Graph(), params, z, 13, text).eps_hat for _ in range(2)]
    assert np.array_equal(outs[0], outs[1])


def test_unet_forward_validates_inputs(params, rng):
    z = rng.normal(size=(4, 8, 8))
    text = nn.embed_tokens(params, np.zeros(8, dtype=int))
    with pytest.raises(ValueError):
        nn.unet_forward(Graph(), params, np.zeros((4, 4, 4)), 0, text)
    with pytest.raises(ValueError):
        nn.unet_forward(Graph(), params, z, -1, text)
    with pytest.raises(ValueError):
        nn.unet_forward(Graph(), params, z, 0, np.full((8, 16), np.nan))


def entry_fd(graph, node, seed_node, seed, flat_idx, h=1e-5):
    base = graph.value(node)
    probes = []
    for s in (h, -h):
        v = base.copy()
        v.reshape(-1)[flat_idx] += s
        vals = graph.replay({node: v})
        probes.append(float((seed * vals[seed_node]).sum()))
    return (probes[0] - probes[1]) / (2.0 * h)


def test_attention_weight_gradients_match_finite_differences(params, rng):
    z = rng.normal(size=(4, 8, 8))
    text = nn.embed_tokens(params, np.array([1, 5, 8, 2, 11, 0, 0, 0]))
    g = Graph()
    out = nn.unet_forward(g, params, z, 30, text)
    seed = rng.normal(size=(1, 4, 8, 8))
    grads = backward(g, out.eps_node, seed)
    checked = 0
    for rec in out.records:
        got = grads[rec.weight_node].reshape(-1)
        n = got.size
        for flat_idx in rng.choice(n, size=12, replace=False):
            fd = entry_fd(g, rec.weight_node, out.eps_node, seed, int(flat_idx))
            a, b = got[int(flat_idx)], fd
            assert abs(a - b) <= max(1e-5 * max(abs(a), abs(b)), 1e-9), \
                f"layer {rec.layer_id} entry {flat_idx}: {a} vs {b}"
            checked += 1
    assert checked >= 20
