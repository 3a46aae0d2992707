import itertools

import numpy as np
import pytest
import torch

from hoitag.encoder import (
    EntityRepresentation,
    HoiEncoder,
    HoiEncoderConfig,
    HoiPrediction,
    cosine_similarity_matrix,
    decode_predictions,
    pointers_from_vectors,
    resolve_triples,
)


@pytest.fixture(scope="module")
def model():
    torch.manual_seed(0)
    return HoiEncoder(HoiEncoderConfig()).eval()


def test_shapes(model):
    x = torch.rand(2, 3, 64, 64)
    out = model(x)
    assert out.features.shape == (2, 64, 64)
    assert out.entities.mu.shape == (2, 8, 64)
    assert out.entities.logits.shape == (2, 8, 7)
    assert out.z.shape == (2, 8, 64)
    assert out.prediction.a_probs.shape == (2, 8, 6)
    assert out.pointers.c_hat_h.dtype == torch.long


def test_resolution_mismatch(model):
    with pytest.raises(ValueError):
        model.encode_backbone(torch.rand(1, 3, 32, 32))


def test_zero_image_finite_and_inputs_distinguished(model):
    with torch.no_grad():
        zero = model(torch.zeros(1, 3, 64, 64))
        other = model(torch.rand(1, 3, 64, 64, generator=torch.Generator().manual_seed(1)))
    for t in (zero.features, zero.entities.mu, zero.prediction.a_probs):
        assert torch.isfinite(t).all()
    assert not torch.allclose(zero.features, other.features)


def test_eval_deterministic(model):
    x = torch.rand(1, 3, 64, 64, generator=torch.Generator().manual_seed(2))
    with torch.no_grad():
        assert torch.equal(model(x).z, model(x).z)


def test_decoder_invariant_to_token_permutation(model):
    g = torch.Generator().manual_seed(3)
    feats = torch.randn(1, 64, 64, generator=g)
    perm = torch.randperm(64, generator=g)
    pos = model.pos
    with torch.no_grad():
        a = model.decode_entities(feats, pos).mu
        b = model.decode_entities(feats[:, perm], pos[perm]).mu
    assert torch.allclose(a, b, atol=1e-5)


# -- pointers ---------------------------------------------------------------------


def test_cosine_zero_norm_is_zero():
    u = torch.tensor([[0.0, 0.0], [1.0, 0.0]])
    v = torch.tensor([[1.0, 1.0], [0.0, 0.0]])
    sim = cosine_similarity_matrix(u, v)
    assert sim[0].tolist() == [0.0, 0.0]
    assert sim[1, 1] == 0.0
    assert sim[1, 0] == pytest.approx(1 / np.sqrt(2))


def test_pointer_hits_matching_entity():
    mu = torch.eye(4)[None] * 3.0
    v = torch.eye(4)[[2, 0]][None]
    p = pointers_from_vectors(v, v, mu)
    assert p.c_hat_h[0].tolist() == [2, 0]


def test_pointer_brute_force_and_scale_invariance():
    g = torch.Generator().manual_seed(4)
    for _ in range(20):
        v_h = torch.randn(1, 3, 16, generator=g, dtype=torch.float64)
        v_o = torch.randn(1, 3, 16, generator=g, dtype=torch.float64)
        mu = torch.randn(1, 4, 16, generator=g, dtype=torch.float64)
        p = pointers_from_vectors(v_h, v_o, mu)
        for i in range(3):
            sims = []
            for j in range(4):
                a, b = v_h[0, i].tolist(), mu[0, j].tolist()
                dot = sum(x * y for x, y in zip(a, b))
                sims.append(dot / (sum(x * x for x in a) ** 0.5 * sum(y * y for y in b) ** 0.5))
            assert int(p.c_hat_h[0, i]) == int(np.argmax(sims))
        for c in (0.01, 7.0, 1e4):
            q = pointers_from_vectors(v_h, v_o, mu * c)
            assert torch.equal(q.c_hat_h, p.c_hat_h) and torch.equal(q.c_hat_o, p.c_hat_o)


def test_ties_go_to_first_slot():
    mu = torch.ones(1, 3, 2)
    p = pointers_from_vectors(torch.ones(1, 1, 2), torch.ones(1, 1, 2), mu)
    assert int(p.c_hat_h) == 0


def test_resolution_by_indexing():
    g = torch.Generator().manual_seed(5)
    ents = EntityRepresentation(torch.randn(1, 4, 8, generator=g), torch.randn(1, 4, 7, generator=g),
                                torch.rand(1, 4, 4, generator=g))
    mu = ents.mu
    p = pointers_from_vectors(mu[:, [3, 1]], mu[:, [0, 2]], mu)
    pred = resolve_triples(p, ents, torch.zeros(1, 2, 6))
    assert torch.equal(pred.b_h[0, 0], ents.boxes[0, 3])
    assert torch.equal(pred.b_o[0, 1], ents.boxes[0, 2])
    assert torch.equal(pred.a_probs, torch.full((1, 2, 6), 0.5))


# -- decoding -------------------------------------------------------------------------


def _prediction(a_probs, h_conf=None, o_conf=None, h_class=None, o_class=None):
    a = torch.tensor(a_probs, dtype=torch.float32)[None]
    K = a.shape[1]
    ones = torch.ones(1, K)
    return HoiPrediction(
        b_h=torch.zeros(1, K, 4), b_o=torch.zeros(1, K, 4),
        h_class=torch.tensor([h_class or [0] * K]), o_class=torch.tensor([o_class or [2] * K]),
        h_conf=ones if h_conf is None else torch.tensor([h_conf]),
        o_conf=ones if o_conf is None else torch.tensor([o_conf]),
        a_logits=torch.logit(a), a_probs=a,
    )


def test_decode_nothing_below_threshold():
    assert decode_predictions(_prediction([[0.1] * 6, [0.4] * 6])) == []


def test_decode_single_slot():
    out = decode_predictions(_prediction([[0.9, 0.1, 0.1, 0.1, 0.1, 0.1], [0.2] * 6]))
    assert [(t.h_class, t.o_class, t.action) for t in out] == [(0, 2, 0)]
    assert out[0].confidence == pytest.approx(0.9)


def test_decode_dedup_keeps_max():
    out = decode_predictions(_prediction([[0.6] + [0.0] * 5, [0.8] + [0.0] * 5]))
    assert len(out) == 1 and out[0].confidence == pytest.approx(0.8)


def test_decode_entity_confidence_gate_and_product():
    pred = _prediction([[0.9] + [0.0] * 5, [0.9, 0.0, 0.0, 0.0, 0.0, 0.0]], h_conf=[0.4, 0.8], o_conf=[1.0, 0.6],
                       o_class=[2, 3])
    out = decode_predictions(pred)
    assert [(t.o_class, round(t.confidence, 6)) for t in out] == [(3, round(0.9 * 0.6, 6))]


def test_decode_monotone_in_threshold():
    g = torch.Generator().manual_seed(6)
    for _ in range(30):
        probs = torch.rand(8, 6, generator=g).tolist()
        pred = _prediction(probs, h_class=torch.randint(0, 3, (8,), generator=g).tolist())
        prev = None
        for th in (0.1, 0.3, 0.5, 0.7, 0.9):
            cur = {(t.h_class, t.o_class, t.action) for t in decode_predictions(pred, th)}
            if prev is not None:
                assert cur <= prev
            prev = cur


def test_decode_sorted_by_confidence():
    out = decode_predictions(_prediction([[0.6, 0.95, 0, 0, 0.7, 0]]))
    assert [t.action for t in out] == [1, 4, 0]


def test_decode_rejects_bad_thresholds():
    with pytest.raises(ValueError):
        decode_predictions(_prediction([[0.5] * 6]), act_threshold=1.0)


def test_pointer_permutation_over_slots():
    g = torch.Generator().manual_seed(7)
    v = torch.randn(1, 3, 8, generator=g)
    mu = torch.randn(1, 4, 8, generator=g)
    base = pointers_from_vectors(v, v, mu).c_hat_h[0].tolist()
    for perm in itertools.permutations(range(4)):
        idx = torch.tensor(perm)
        got = pointers_from_vectors(v, v, mu[:, idx]).c_hat_h[0].tolist()
        assert [perm[j] for j in got] == base
