import numpy as np
import pytest

from taskprune.attribution import (
    AttributionMap,
    attribute_dataset,
    attribute_example,
    attribute_unsupervised,
    draw_pseudo_targets,
    fpp_scores,
    non_label_tokens,
    rap_scores,
)
from taskprune.model import forward, prunable_registry
from taskprune.tasks import BOS, EOS, DataError, Example, tokenize

from conftest import randomized, rel_err, tiny_config


@pytest.fixture(scope="module")
def params():
    return randomized(tiny_config(n_enc_layers=1, n_dec_layers=2), seed=11)


def _data(n, seed=0):
    rng = np.random.default_rng(seed)
    words = ["ab", "cd", "ef", "gh", "ij"]
    return [Example("t: " + " ".join(rng.choice(words, size=3)), str(rng.choice(["yes", "no"]))) for _ in range(n)]


def _label_prob_sum(params, x, y, edits=None):
    src = tokenize(x)
    tgt = tokenize(y) + [EOS]
    logp, _ = forward(params, src, [BOS] + tgt[:-1], edits=edits)
    return float(np.exp(logp.data[0, np.arange(len(tgt)), tgt]).sum())


def _scale_edit(entry, index, factor):
    def edit(h):
        scale = np.ones(h.shape[2:])
        if entry.head is None:
            scale[index] = factor
        else:
            scale[entry.head, index] = factor
        return h * scale

    return {entry.probe_name: edit}


def test_scores_match_finite_difference_oracle(params):
    x, y = "t: ab cd", "yes"
    amap = attribute_example(params, x, y)
    rng = np.random.default_rng(0)
    eps = 1e-5
    checked = 0
    for entry in prunable_registry(params.config):
        for i in rng.choice(entry.size, size=min(2, entry.size), replace=False):
            plus = _label_prob_sum(params, x, y, _scale_edit(entry, i, 1 + eps))
            minus = _label_prob_sum(params, x, y, _scale_edit(entry, i, 1 - eps))
            fd = (plus - minus) / (2 * eps)
            assert rel_err(amap.scores[entry.key][i], fd, floor=1e-9) < 1e-3, (entry.key, i)
            checked += 1
    assert checked >= 20


def test_map_covers_registry_with_finite_scores(params):
    amap = attribute_example(params, "t: ab", "no")
    reg = prunable_registry(params.config)
    assert list(amap.scores) == [e.key for e in reg]
    for e in reg:
        assert amap.scores[e.key].shape == (e.size,)
        assert np.isfinite(amap.scores[e.key]).all()
    assert amap.method == "supervised" and amap.sample_count == 1


def test_single_example_dataset_equals_example(params):
    ex = _data(1)[0]
    a = attribute_dataset(params, [ex])
    b = attribute_example(params, ex.input, ex.label)
    for k in a.scores:
        assert np.array_equal(a.scores[k], b.scores[k])


def test_duplicated_dataset_doubles(params):
    data = _data(6)
    once = attribute_dataset(params, data, batch_size=4)
    twice = attribute_dataset(params, data + data, batch_size=4)
    for k in once.scores:
        np.testing.assert_allclose(twice.scores[k], 2 * once.scores[k], rtol=1e-12, atol=1e-15)


def test_batch_size_invariance(params):
    data = _data(16, seed=1)
    a = attribute_dataset(params, data, batch_size=1)
    b = attribute_dataset(params, data, batch_size=4)
    for k in a.scores:
        assert np.abs(a.scores[k] - b.scores[k]).max() < 1e-8


def test_linearity_over_dataset_union(params):
    d1, d2 = _data(5, seed=2), _data(4, seed=3)
    whole = attribute_dataset(params, d1 + d2)
    parts = attribute_dataset(params, d1) + attribute_dataset(params, d2)
    for k in whole.scores:
        np.testing.assert_allclose(whole.scores[k], parts.scores[k], rtol=1e-9, atol=1e-12)
    assert parts.sample_count == 9


def test_empty_dataset_errors(params):
    with pytest.raises(DataError):
        attribute_dataset(params, [])
    with pytest.raises(DataError):
        fpp_scores(params, [])
    with pytest.raises(DataError):
        rap_scores(params, [], ["yes"], seed=0)
    with pytest.raises(DataError):
        attribute_unsupervised(params, [], ["yes"])


def test_empty_label_is_an_error(params):
    with pytest.raises(DataError):
        attribute_example(params, "t: ab", "")


def test_unsupervised_singleton_is_absolute_supervised(params):
    x = "t: gh ij"
    sup = attribute_example(params, x, "yes")
    uns = attribute_unsupervised(params, [x], ["yes"])
    for k in sup.scores:
        assert np.array_equal(uns.scores[k], np.abs(sup.scores[k]))


def test_unsupervised_two_candidates_is_sum_of_absolutes(params):
    x = "t: ab ef"
    a = attribute_example(params, x, "yes")
    b = attribute_example(params, x, "no")
    uns = attribute_unsupervised(params, [x], ["yes", "no"])
    for k in a.scores:
        assert np.array_equal(uns.scores[k], np.abs(a.scores[k]) + np.abs(b.scores[k]))


def test_unsupervised_bounds_and_sign(params):
    inputs = [ex.input for ex in _data(5, seed=4)]
    uns = attribute_unsupervised(params, inputs, ["yes", "no", "maybe"], batch_size=2)
    for y in ("yes", "no", "maybe"):
        for x in inputs:
            sup = attribute_example(params, x, y)
            for k in sup.scores:
                assert (uns.scores[k] >= np.abs(sup.scores[k]) - 1e-15).all()
    for v in uns.scores.values():
        assert (v >= 0).all()


def test_unsupervised_empty_candidates(params):
    with pytest.raises(DataError):
        attribute_unsupervised(params, ["t: ab"], [])


def test_fpp_non_negative_and_doubles(params):
    data = _data(4, seed=5)
    once = fpp_scores(params, data)
    twice = fpp_scores(params, data + data)
    for k in once.scores:
        assert (once.scores[k] >= 0).all()
        np.testing.assert_allclose(twice.scores[k], 2 * once.scores[k], rtol=1e-12)


def test_fpp_constant_activation_gives_its_magnitude():
    config = tiny_config()
    params = randomized(config, seed=2)
    # one-token input: encoder probes cover exactly one position
    c = -0.75
    p = params.copy()
    p.tensors["enc.0.ffn.w1"] = np.zeros_like(p.tensors["enc.0.ffn.w1"])
    p.tensors["enc.0.ffn.b1"] = np.full_like(p.tensors["enc.0.ffn.b1"], c)
    amap = fpp_scores(p, [Example("a", "b")])
    # relu clamps the negative bias to 0; flip sign to probe a live constant
    assert np.array_equal(amap.scores["enc.0.ffn"], np.zeros(config.d_ff))
    p.tensors["enc.0.ffn.b1"] = np.full_like(p.tensors["enc.0.ffn.b1"], -c)
    amap = fpp_scores(p, [Example("a", "b")])
    assert np.array_equal(amap.scores["enc.0.ffn"], np.full(config.d_ff, abs(c)))
    # the decoder sees BOS and the label token: two positions of the same constant
    p.tensors["dec.0.ffn.w1"] = np.zeros_like(p.tensors["dec.0.ffn.w1"])
    p.tensors["dec.0.ffn.b1"] = np.full_like(p.tensors["dec.0.ffn.b1"], -c)
    amap = fpp_scores(p, [Example("a", "b")])
    assert np.array_equal(amap.scores["dec.0.ffn"], np.full(config.d_ff, 2 * abs(c)))


def test_dead_and_disconnected_neurons_score_zero():
    config = tiny_config()
    params = randomized(config, seed=4)
    # neuron 0: dead (never active); neuron 1: active but its output row is zero
    params.tensors["enc.0.ffn.w1"][:, 0] = 0.0
    params.tensors["enc.0.ffn.b1"][0] = -1.0
    params.tensors["enc.0.ffn.w2"][1, :] = 0.0
    amap = attribute_dataset(params, _data(3))
    assert amap.scores["enc.0.ffn"][0] == 0.0
    assert amap.scores["enc.0.ffn"][1] == 0.0
    assert np.abs(amap.scores["enc.0.ffn"][2:]).max() > 0


def test_pseudo_targets_avoid_label_tokens():
    data = _data(30)
    labels = ["yes", "no"]
    banned = {t for lab in labels for t in tokenize(lab)}
    targets = draw_pseudo_targets(data, labels, 128, seed=3)
    for ex, y in zip(data, targets):
        assert len(y) == len(tokenize(ex.label))
        assert not banned & set(y)
    assert targets == draw_pseudo_targets(data, labels, 128, seed=3)
    assert targets != draw_pseudo_targets(data, labels, 128, seed=4)


def test_pseudo_targets_need_a_free_token():
    # a 5-token vocabulary has a single character id: the space
    assert non_label_tokens(["a"], 5) == tokenize(" ")
    assert non_label_tokens([" "], 5) == []
    with pytest.raises(DataError):
        draw_pseudo_targets([Example("x", " ")], [" "], 5, seed=0)


def test_rap_is_deterministic_per_seed(params):
    data = _data(5, seed=6)
    a = rap_scores(params, data, ["yes", "no"], seed=1)
    b = rap_scores(params, data, ["yes", "no"], seed=1)
    c = rap_scores(params, data, ["yes", "no"], seed=2)
    assert all(np.array_equal(a.scores[k], b.scores[k]) for k in a.scores)
    assert any(not np.array_equal(a.scores[k], c.scores[k]) for k in a.scores)
    assert a.method == "rap"


def test_file_round_trip(tmp_path, params):
    amap = attribute_dataset(params, _data(3))
    path = tmp_path / "a.json"
    amap.save(path)
    back = AttributionMap.load(path)
    assert back.method == amap.method and back.sample_count == 3 and back.fingerprint == amap.fingerprint
    for k in amap.scores:
        assert back.scores[k].tobytes() == amap.scores[k].tobytes()


def test_file_with_wrong_format_rejected(tmp_path):
    path = tmp_path / "x.json"
    path.write_text('{"format": "other", "version": 1}')
    with pytest.raises(DataError):
        AttributionMap.load(path)
