import math
from dataclasses import replace

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from conftest import seeds
from morphbench.env import MAX_TOKENS, EnvConfig, MorphologyLanes
from morphbench.policy import (
    ActionDistribution,
    ActorCritic,
    PolicyConfig,
    discretize_bins,
    ema_update,
    load_policy,
    save_checkpoint,
    symexp,
    symlog,
)
from morphbench.procgen import GenParams, gen_arm3, gen_primitive_category

TINY = dict(d_model=8, n_heads=2, ff_width=16, mlp_hidden=(16, 16))


def observations(seed=0, n=4):
    """A batch mixing an arm3 (5 links) and a stick (3 links) reach observation."""
    arm = MorphologyLanes(EnvConfig(), gen_arm3(GenParams(seed)), n // 2, seed).observe()
    stick = MorphologyLanes(EnvConfig(), gen_primitive_category("stick", GenParams(seed)), n - n // 2, seed).observe()
    cat = lambda a, b: np.concatenate([a, b])
    return cat(arm.tokens, stick.tokens), cat(arm.mask, stick.mask), cat(arm.action_mask, stick.action_mask)


def tiny_policy(backbone="transformer", head="continuous", transform="identity", seed=0, **kw):
    torch.manual_seed(seed)
    return ActorCritic(PolicyConfig(backbone=backbone, head=head, value_transform=transform, **TINY, **kw)).double()


# ---------------------------------------------------------------- symlog

def test_symlog_values():
    assert symlog(0.0) == 0.0
    assert abs(symlog(math.e - 1) - 1.0) <= 1e-12
    assert symlog(-(math.e - 1)) == pytest.approx(-1.0, abs=1e-12)
    t = torch.tensor([-3.0, 0.0, 2.0], dtype=torch.float64)
    assert torch.allclose(symlog(t), torch.as_tensor(symlog(t.numpy())))


def test_symexp_inverts_symlog():
    x = np.linspace(-1e6, 1e6, 200001)
    assert np.max(np.abs(symexp(symlog(x)) - x)) <= 1e-9


@given(st.floats(-1e6, 1e6), st.floats(-1e6, 1e6))
def test_symlog_monotone(a, b):
    if a < b:
        assert symlog(a) <= symlog(b)


# ---------------------------------------------------------------- bins

def test_degenerate_three_bins():
    assert list(discretize_bins(3, 0.05, 0.05)) == [-0.05, 0.0, 0.05]


def test_eleven_bins_geometric():
    b = discretize_bins(11, 0.001, 0.05)
    r = (0.05 / 0.001) ** (1 / 4)
    expect = 0.001 * r ** np.arange(5)
    assert np.allclose(b[6:], expect, rtol=1e-12)
    assert b[-1] == 0.05 and b[5] == 0.0
    assert np.all(np.diff(b) > 0)


@given(st.integers(1, 10), st.floats(1e-4, 0.01), st.floats(0.011, 0.2))
def test_bins_symmetric(k, dmin, dmax):
    b = discretize_bins(2 * k + 1, dmin, dmax)
    assert np.array_equal(b, -b[::-1])


def test_bins_infeasible():
    with pytest.raises(ValueError):
        discretize_bins(11, 0.06, 0.05)
    with pytest.raises(ValueError):
        discretize_bins(4, 0.001, 0.05)
    with pytest.raises(ValueError):
        PolicyConfig(n_bins=10)


# ---------------------------------------------------------------- distributions

def test_discrete_sampling_frequencies():
    logits = torch.tensor([[[0.3, -1.0, 2.0, 0.0, 0.5]]], dtype=torch.float64)
    bins = torch.tensor(discretize_bins(5, 0.01, 0.05))[None, None]
    d = ActionDistribution("discrete", torch.tensor([[True]]), logits=logits.expand(100_000, 1, 5),
                           bins=bins.expand(100_000, 1, 5))
    _, raw, _ = d.sample(np.random.default_rng(0))
    freq = np.bincount(raw[:, 0].numpy(), minlength=5) / 100_000
    p = torch.softmax(logits[0, 0], -1).numpy()
    sigma = np.sqrt(p * (1 - p) / 100_000)
    assert np.all(np.abs(freq - p) <= 3 * sigma)


def test_deterministic_discrete_zero_bin():
    logits = torch.tensor([[[0.0, 0.0, 9.0, 0.0, 0.0]]])
    bins = torch.tensor(discretize_bins(5, 0.01, 0.05), dtype=torch.float32)[None, None]
    dq, raw, _ = ActionDistribution("discrete", torch.tensor([[True]]), logits=logits, bins=bins).sample(None, True)
    assert float(dq) == 0.0 and int(raw) == 2


def test_deterministic_continuous_log_prob_is_peak_density():
    mean, std = torch.tensor([[0.01, -0.02]]), torch.tensor([[0.03, 0.01]])
    d = ActionDistribution("continuous", torch.tensor([[True, True]]), mean=mean, std=std)
    dq, _, lp = d.sample(None, True)
    assert torch.equal(dq, mean)
    expect = sum(-math.log(s) - 0.5 * math.log(2 * math.pi) for s in (0.03, 0.01))
    assert float(lp) == pytest.approx(expect, abs=1e-5)


def test_entropy_closed_forms():
    k, B = 3, 7
    mask = torch.tensor([[True] * k + [False]])
    uniform = ActionDistribution("discrete", mask, logits=torch.zeros(1, k + 1, B), bins=torch.zeros(1, k + 1, B))
    assert float(uniform.entropy()) == pytest.approx(k * math.log(B), abs=1e-5)
    onehot = torch.full((1, k + 1, B), -1e9)
    onehot[..., 0] = 0.0
    peaked = ActionDistribution("discrete", mask, logits=onehot, bins=torch.zeros(1, k + 1, B))
    assert float(peaked.entropy()) == pytest.approx(0.0, abs=1e-6)
    ents = [float(ActionDistribution("continuous", mask, mean=torch.zeros(1, k + 1),
                                     std=torch.full((1, k + 1), math.exp(s))).entropy()) for s in (-2.0, -1.0, 0.5)]
    assert ents[0] < ents[1] < ents[2]
    assert ents[2] == pytest.approx(k * (0.5 + 0.5 * math.log(2 * math.pi) + 0.5), abs=1e-5)


# ---------------------------------------------------------------- networks

@pytest.mark.parametrize("backbone", ["mlp", "transformer"])
@pytest.mark.parametrize("head", ["continuous", "discrete"])
def test_masked_slots_do_not_matter(backbone, head):
    pol = tiny_policy(backbone, head)
    tokens, mask, amask = observations()
    pol.update_normalizer(tokens, mask)
    noisy = tokens.copy()
    noisy[~mask] = np.random.default_rng(0).normal(size=(int((~mask).sum()), 48))
    d1, v1 = pol(tokens, mask, amask)
    d2, v2 = pol(noisy, mask, amask)
    assert torch.allclose(v1, v2, atol=1e-12)
    if head == "continuous":
        m = d1.action_mask
        assert torch.allclose(d1.mean[m], d2.mean[m], atol=1e-12)
    else:
        assert torch.allclose(d1.log_probs, d2.log_probs, atol=1e-12)


def test_permuting_padding_slots():
    pol = tiny_policy("mlp")
    tokens, mask, amask = observations()
    perm = np.arange(MAX_TOKENS)
    perm[10:] = perm[10:][::-1]   # every slot >= 10 is padding
    d1, v1 = pol(tokens, mask, amask)
    d2, v2 = pol(tokens[:, perm], mask[:, perm], amask[:, perm])
    assert torch.allclose(v1, v2) and torch.allclose(d1.mean, d2.mean)


def test_transformer_variable_length():
    pol = tiny_policy("transformer")
    tokens, mask, amask = observations()
    for rows in ([0], [3], [0, 3]):
        d, v = pol(tokens[rows], mask[rows], amask[rows])
        assert torch.isfinite(v).all() and torch.isfinite(d.mean).all()
    # the short robot alone gives the same value as inside the mixed batch
    _, alone = pol(tokens[[3]], mask[[3]], amask[[3]])
    _, mixed = pol(tokens, mask, amask)
    assert alone[0].item() == pytest.approx(mixed[3].item(), abs=1e-10)


@given(seeds)
@settings(max_examples=10)
def test_immovable_joints_never_move(seed):
    torch.manual_seed(seed % 2**31)
    cfg = PolicyConfig(head=["continuous", "discrete"][seed % 2], backbone=["mlp", "transformer"][seed // 2 % 2],
                       **TINY)
    pol = ActorCritic(cfg)
    for p in pol.parameters():
        p.data.normal_(0, 3.0)
    obs = MorphologyLanes(EnvConfig(), gen_arm3(GenParams(seed % 97)), 3, 0).observe()
    dq, _, lp, _ = pol.act(obs, np.random.default_rng(seed))
    assert np.all(dq[~obs.action_mask] == 0.0)
    assert np.all(np.isfinite(lp))
    assert np.all(np.abs(dq[:, 1:4]) <= 0.05 + 1e-7) or cfg.head == "continuous"


def test_discrete_probabilities_normalized():
    pol = tiny_policy(head="discrete")
    d, _ = pol(*observations())
    assert torch.allclose(d.probs.sum(-1), torch.ones(1, dtype=torch.float64), atol=1e-6)
    ent = d.entropy()
    n_mov = d.action_mask.sum(-1)
    assert torch.all(ent >= -1e-9) and torch.all(ent <= n_mov * math.log(pol.cfg.n_bins) + 1e-9)


def test_value_transform_roundtrip():
    pol = tiny_policy(transform="symlog")
    t = torch.tensor([-50.0, 0.0, 3.0], dtype=torch.float64)
    assert torch.allclose(pol.decode_value(pol.encode_target(t)), t)


def test_ema_update_rule():
    pol = tiny_policy()
    before = {n: p.clone() for n, p in pol.ema_critic.named_parameters()}
    for p in pol.critic.parameters():
        p.data.add_(1.0)
    pol.ema_update(0.9)
    for n, p in pol.ema_critic.named_parameters():
        src = dict(pol.critic.named_parameters())[n]
        assert torch.allclose(p, 0.9 * before[n] + 0.1 * src)
    with pytest.raises(ValueError):
        ema_update(pol.critic, tiny_policy("mlp").critic, 0.5)


def test_token_normalizer_statistics():
    pol = tiny_policy()
    tokens, mask, _ = observations()
    pol.update_normalizer(tokens[:2], mask[:2])
    pol.update_normalizer(tokens[2:], mask[2:])
    valid = tokens[mask]
    assert np.allclose(pol.normalizer.mean.numpy(), valid.mean(0), atol=1e-12)
    assert np.allclose(pol.normalizer.var.numpy(), valid.var(0), atol=1e-12)


def test_checkpoint_round_trip(tmp_path):
    pol = tiny_policy(head="discrete")
    tokens, mask, amask = observations()
    pol.update_normalizer(tokens, mask)
    path = tmp_path / "p.npz"
    save_checkpoint(path, pol, step=42, config={"x": 1})
    back, meta, _ = load_policy(path)
    assert meta["step"] == 42 and meta["config"] == {"x": 1}
    back = back.double()
    d1, v1 = pol(tokens, mask, amask)
    d2, v2 = back(tokens, mask, amask)
    assert torch.allclose(v1, v2) and torch.allclose(d1.logits, d2.logits)
    with pytest.raises(ValueError):
        load_policy(path, expect=replace(pol.cfg, d_model=16))
