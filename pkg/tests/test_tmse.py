import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from nextreid.data import CaptionRecord
from nextreid.encoders import MODALITIES, VisualFeatures
from nextreid.tmse import (
    MaskTape,
    ModulationNet,
    ResidualExpert,
    SamplingRoute,
    SemanticExperts,
    SentenceSampler,
    binarize,
    dump_route_states,
    expert_forward,
    mask_tape,
    modulate,
    relevance,
    route_maps,
    top_k_mask,
)

D = 16


def _feats(b=2, grid=(4, 2), dtype=torch.float64, seed=0):
    g = torch.Generator().manual_seed(seed)
    n = grid[0] * grid[1]
    return VisualFeatures(
        torch.randn(b, 3, D, generator=g, dtype=dtype), torch.randn(b, 3, n, D, generator=g, dtype=dtype), grid
    )


def _zero_(module):
    for p in module.parameters():
        torch.nn.init.zeros_(p)


# ---------------------------------------------------------------- experts (residual block)

def test_zero_mlp_is_identity():
    e = ResidualExpert(D).double().eval()
    _zero_(e.fc2)
    x = torch.randn(2, 5, D, dtype=torch.float64)
    assert torch.equal(expert_forward(e, x), x)


@given(st.integers(1, 3), st.integers(1, 9))
def test_expert_shape(b, n):
    assert ResidualExpert(D)(torch.randn(b, n, D)).shape == (b, n, D)


def test_dropout_reproducible_under_seed():
    e = ResidualExpert(D, dropout=0.5).train()
    x = torch.randn(2, 4, D)
    torch.manual_seed(3)
    a = e(x)
    torch.manual_seed(3)
    assert torch.equal(a, e(x))


# ---------------------------------------------------------------- routes

def test_zero_route_outputs_zero():
    r = SamplingRoute(D).double()
    _zero_(r)
    alpha, sigma = route_maps(r, _feats(), 0)
    assert torch.equal(alpha, torch.zeros(2, 4, 2, dtype=torch.float64))
    assert torch.equal(sigma, torch.zeros(2, dtype=torch.float64))


def test_route_grid_shape_and_hidden_width():
    r = SamplingRoute(64)
    assert r.tok_fc[0].out_features == 32
    alpha, sigma = r(torch.randn(1, 8, 64), torch.randn(1, 64), (4, 2))
    assert alpha.shape == (1, 4, 2) and sigma.shape == (1,)


def test_route_grid_mismatch():
    with pytest.raises(ValueError, match="grid"):
        SamplingRoute(D)(torch.randn(1, 7, D), torch.randn(1, D), (4, 2))


def test_route_is_tokenwise():
    r = SamplingRoute(D).double()
    tok, cls = torch.randn(1, 8, D, dtype=torch.float64), torch.randn(1, D, dtype=torch.float64)
    a0, _ = r(tok, cls, (4, 2))
    tok2 = tok.clone()
    tok2[0, 5] += 0.5
    a1, _ = r(tok2, cls, (4, 2))
    changed = (a0 != a1).flatten().nonzero().flatten().tolist()
    assert changed == [5]


# ---------------------------------------------------------------- straight-through masks

def test_binarize_example():
    m = binarize(torch.tensor([[[0.2, 0.9], [0.5, 0.1]]]), torch.tensor([0.4]))
    assert m.tolist() == [[[0.0, 1.0], [1.0, 0.0]]]


def test_binarize_low_sigma_all_ones():
    x = torch.randn(1, 4, 2)
    assert torch.equal(binarize(x, x.min() - 1), torch.ones_like(x))


@given(st.integers(0, 10_000), st.floats(-2, 2))
def test_mask_exactness(seed, sigma):
    x = torch.randn(3, 4, 2, generator=torch.Generator().manual_seed(seed))
    m = binarize(x, sigma)
    assert set(m.unique().tolist()) <= {0.0, 1.0}
    assert int(m.sum()) == int((x > sigma).sum())


def test_straight_through_matches_hand_chain_rule():
    alpha = torch.tensor([[[0.3, -0.2], [0.7, 0.1]]], dtype=torch.float64, requires_grad=True)
    sigma = torch.tensor([0.15], dtype=torch.float64, requires_grad=True)
    feats = torch.tensor([[[1.5, -2.0], [0.25, 4.0]]], dtype=torch.float64)
    (binarize(alpha, sigma) * feats).sum().backward()
    # d/d alpha of sum(mask * F) with mask treated as (alpha - sigma): F
    assert torch.allclose(alpha.grad, feats, rtol=0, atol=1e-12)
    assert abs(sigma.grad.item() + feats.sum().item()) < 1e-12


def test_tape_replay_reproduces_value():
    x = torch.randn(2, 4, 2, dtype=torch.float64)
    tape = MaskTape()
    with mask_tape(tape):
        a = binarize(x, 0.0)
    with mask_tape(tape.replay()):
        b = binarize(x, 0.0)
        tape.rewind()
        c = binarize(x + 1e-3, 0.0)
    assert torch.equal(a, b)
    assert torch.allclose(c - b, torch.full_like(c, 1e-3))


def test_top_k_counts():
    m = top_k_mask(torch.randn(3, 4, 2), 0.5)
    assert m.flatten(1).sum(1).tolist() == [4.0, 4.0, 4.0]


# ---------------------------------------------------------------- sentence sampling

def _caps(n):
    return {m: CaptionRecord.from_sentences([f"{m} s{i}." for i in range(n)]) for m in MODALITIES}


def test_single_sentence_always_chosen():
    s = SentenceSampler(0, 3)
    for step in range(5):
        assert s.sample_sentences(_caps(1), 0, step) == [f"{m} s0." for m in MODALITIES]


def test_k_max_one():
    s = SentenceSampler(0, 1)
    for step in range(10):
        for text in s.sample_sentences(_caps(5), 1, step):
            assert text.count(".") == 1


def test_sampler_deterministic_and_eval_full():
    s = SentenceSampler(4, 3)
    assert s.sample_sentences(_caps(6), 2, 7, 11) == s.sample_sentences(_caps(6), 2, 7, 11)
    assert s.sample_sentences(_caps(6), 2, 7, training=False) == [_caps(6)[m].text for m in MODALITIES]


@given(st.integers(1, 8), st.integers(1, 5), st.integers(0, 100), st.integers(0, 5))
def test_subset_properties(n, k_max, step, expert):
    sents = [f"s{i}." for i in range(n)]
    sub = SentenceSampler(0, k_max).subset(sents, expert, step, 0)
    assert 1 <= len(sub) <= min(n, k_max)
    assert sub == sorted(sub, key=sents.index)  # original order, no repeats
    assert len(set(sub)) == len(sub)


def test_subset_size_law_covers_range():
    sizes = {len(SentenceSampler(0, 3).subset([f"s{i}." for i in range(6)], 0, step, 0)) for step in range(200)}
    assert sizes == {1, 2, 3}


def test_sampler_empty():
    with pytest.raises(ValueError):
        SentenceSampler().subset([], 0, 0, 0)


# ---------------------------------------------------------------- relevance and modulation

def test_relevance_cosines():
    t = torch.tensor([[1.0, 0.0]], dtype=torch.float64)
    tok = torch.tensor([[[2.0, 0.0], [0.0, 3.0], [-1.0, 0.0], [0.0, 0.0]]], dtype=torch.float64)
    beta = relevance(t, tok, (2, 2))
    assert beta.flatten().tolist() == [1.0, 0.0, -1.0, 0.0]


@given(st.integers(0, 10_000))
def test_relevance_bounded(seed):
    g = torch.Generator().manual_seed(seed)
    beta = relevance(torch.randn(2, D, generator=g), torch.randn(2, 8, D, generator=g) * 100, (4, 2))
    assert beta.abs().max() <= 1.0 and torch.isfinite(beta).all()


def test_zero_fusion_is_identity():
    net = ModulationNet().double()
    _zero_(net)
    alpha = torch.randn(2, 4, 2, dtype=torch.float64)
    gamma = modulate(net, alpha, torch.rand(2, 4, 2, dtype=torch.float64))
    assert (gamma - alpha).abs().max().item() == 0.0


def test_modulation_responds_to_beta():
    net = ModulationNet().double()
    with torch.no_grad():
        net.fuse.weight.copy_(torch.tensor([[0.5, 1.0]]))
        net.fuse.bias.zero_()
    alpha = torch.zeros(1, 4, 2, dtype=torch.float64)
    g0 = modulate(net, alpha, torch.zeros_like(alpha))
    g1 = modulate(net, alpha, torch.ones_like(alpha))
    assert g0.shape == alpha.shape
    assert torch.equal(g0, alpha) and torch.allclose(g1, torch.full_like(alpha, np.tanh(1.0)))


def test_modulate_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        modulate(ModulationNet(), torch.zeros(1, 4, 2), torch.zeros(1, 2, 4))


# ---------------------------------------------------------------- expert bank

def _bank(**kw):
    torch.manual_seed(0)
    return SemanticExperts(D, kw.pop("n", 3), dropout=0.0, **kw).double()


def test_bank_output_shapes():
    out, states = _bank()(_feats())
    assert len(out) == 3 and all(o.shape == (2, 24, D) for o in out)
    assert len(states) == 3 and all(len(r) == 3 for r in states)


def test_all_token_mask_no_zeroing():
    bank = _bank(sampling="all_token")
    feats = _feats()
    out, states = bank(feats)
    for i, expert in enumerate(bank.experts):
        ref = torch.cat([expert(feats.tok[:, m]) for m in range(3)], dim=1)
        assert torch.equal(out[i], ref)
        assert all(st.mask.mean().item() == 1.0 for st in states[i])


def test_zero_mask_zero_rows():
    bank = _bank()
    with torch.no_grad():
        for r in bank.routes[0][1].cls_fc:
            if isinstance(r, torch.nn.Linear):
                r.weight.zero_()
        bank.routes[0][1].cls_fc[2].bias.fill_(1e6)  # sigma huge -> nir mask all zeros
    out, states = bank(_feats())
    assert states[0][1].mask.sum() == 0
    assert torch.equal(out[0][:, 8:16], torch.zeros(2, 8, D, dtype=torch.float64))
    assert out[0][:, :8].abs().sum() > 0 or states[0][0].mask.sum() == 0


def test_mask_matches_active_map():
    bank = _bank()
    feats = _feats()
    texts = [torch.randn(2, 3, D, dtype=torch.float64) for _ in range(3)]
    _, states = bank(feats, texts)
    for row in states:
        for st in row:
            assert torch.equal(st.mask, (st.gamma > st.sigma[:, None, None]).double())
    _, states = bank(feats)
    for row in states:
        for st in row:
            assert st.gamma is None and torch.equal(st.mask, (st.alpha > st.sigma[:, None, None]).double())


def test_dynamic_reduces_to_fixed_sigma():
    dyn, fixed = _bank(sampling="dynamic"), _bank(sampling="fixed_sigma", fixed_sigma=0.25)
    fixed.load_state_dict(dyn.state_dict())
    with torch.no_grad():
        for row in dyn.routes:
            for r in row:
                r.cls_fc[2].weight.zero_()
                r.cls_fc[2].bias.fill_(0.25)
    feats = _feats()
    a, _ = dyn(feats)
    b, _ = fixed(feats)
    for x, y in zip(a, b):
        assert torch.equal(x, y)


def test_eval_determinism():
    bank = SemanticExperts(D, 2, dropout=0.3).double().eval()
    feats = _feats()
    a, _ = bank(feats)
    b, _ = bank(feats)
    assert all(torch.equal(x, y) for x, y in zip(a, b))


def test_per_expert_independence():
    bank = _bank()
    feats = _feats()
    before, _ = bank(feats)
    with torch.no_grad():
        bank.experts[1].fc1.weight.add_(1.0)
        bank.routes[1][0].tok_fc[0].weight.add_(1.0)
    after, _ = bank(feats)
    assert torch.equal(before[0], after[0]) and torch.equal(before[2], after[2])
    assert not torch.equal(before[1], after[1])


def test_shared_route_type():
    bank = _bank(route_type="modality_shared")
    assert all(len(r) == 1 for r in bank.routes)
    out, _ = bank(_feats())
    assert out[0].shape == (2, 24, D)


def test_bank_rejects_unknown_options():
    with pytest.raises(ValueError):
        SemanticExperts(D, route_type="per_token")
    with pytest.raises(ValueError):
        SemanticExperts(D, sampling="random")


def test_dump_route_states(tmp_path):
    import json

    _, states = _bank()(_feats(), [torch.randn(2, 3, D, dtype=torch.float64) for _ in range(3)])
    dump_route_states(states, tmp_path / "r.json", index=1)
    obj = json.loads((tmp_path / "r.json").read_text())
    assert set(obj) == {"expert0", "expert1", "expert2"}
    assert set(obj["expert0"]) == set(MODALITIES)
    assert np.array(obj["expert2"]["tir"]["mask"]).shape == (4, 2)
