import csv
import itertools
import shutil
from pathlib import Path

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from conftest import seeds
from oracles import fd_gradient_errors, gae_oracle
from morphbench.config import preset
from morphbench.env import EnvConfig, VecEnv
from morphbench.policy import ActorCritic, PolicyConfig, load_policy
from morphbench.procgen import GenParams, gen_arm3
from morphbench.trainer import (
    METRIC_COLUMNS,
    RolloutBuffer,
    Trainer,
    collect_rollout,
    finetune,
    gae,
    minibatch_indices,
    normalize_advantages,
    ppo_loss,
    ppo_update,
    prepare_run_dir,
    resume,
    sample_task_weights,
)

TINY = dict(d_model=8, n_heads=2, ff_width=16, mlp_hidden=(16, 16))


def small_rc(agent="se", total=256, **train):
    t = dict(total_env_steps=total, n_envs=4, rollout_T=8, minibatches=2, epochs=2, eval_every=128,
             eval_steps=40, eval_lanes=4)
    t.update(train)
    policy = dict(TINY, backbone="mlp" if agent in ("se", "me-mlp") else "transformer")
    return preset(agent, name="t", benchmark="arm3", seed=3, train=t, policy=policy)


# ---------------------------------------------------------------- GAE

def random_episode_arrays(rng, T=20, N=3):
    rewards = rng.normal(size=(T, N))
    values = rng.normal(size=(T, N))
    next_values = rng.normal(size=(T, N))
    terminated = rng.random((T, N)) < 0.1
    truncated = (rng.random((T, N)) < 0.1) & ~terminated
    return rewards, values, next_values, terminated, terminated | truncated


@given(seeds, st.floats(0.5, 1.0), st.floats(0.0, 1.0))
def test_gae_matches_direct_summation(seed, gamma, lam):
    r, v, nv, term, done = random_episode_arrays(np.random.default_rng(seed))
    adv, ret = gae(r, v, nv, term.astype(float), done.astype(float), gamma, lam)
    assert np.max(np.abs(adv - gae_oracle(r, v, nv, term, done, gamma, lam))) <= 1e-9
    assert np.allclose(ret, adv + v)


def test_gae_lambda_one_is_discounted_return():
    rewards = np.array([[1.0], [2.0], [3.0]])
    values = np.zeros((3, 1))
    term = np.array([[0.0], [0.0], [1.0]])
    # the last next value sits behind a terminal step and must be ignored
    next_values = np.array([[0.0], [0.0], [99.0]])
    adv, _ = gae(rewards, values, next_values, term, term, 0.5, 1.0)
    assert adv[:, 0].tolist() == [1 + 0.5 * 2 + 0.25 * 3, 2 + 0.5 * 3, 3.0]


def test_truncation_bootstraps_but_termination_does_not():
    r, v = np.zeros((1, 2)), np.zeros((1, 2))
    nv = np.full((1, 2), 10.0)
    adv, _ = gae(r, v, nv, np.array([[1.0, 0.0]]), np.array([[1.0, 1.0]]), 0.9, 0.95)
    assert adv[0].tolist() == [0.0, 9.0]


def test_normalized_advantages():
    a = normalize_advantages(np.random.default_rng(0).normal(3, 2, size=(8, 4)))
    assert abs(a.mean()) < 1e-12 and abs(a.std() - 1) < 1e-6


# ---------------------------------------------------------------- gradients

def loss_inputs(policy, seed=0):
    env = VecEnv(EnvConfig(), [(gen_arm3(GenParams(seed)), "reach")], 6, seed)
    obs = env.observe()
    policy.update_normalizer(obs.tokens, obs.mask)
    rng = np.random.default_rng(seed)
    with torch.no_grad():
        _, raw, lp, _ = policy.act(obs, rng)
    old = lp + rng.normal(0, 0.3, size=lp.shape)
    return obs, raw, old, rng.normal(size=6), rng.normal(size=6)


@pytest.mark.parametrize("backbone,head,transform",
                         list(itertools.product(["mlp", "transformer"], ["continuous", "discrete"],
                                                ["identity", "symlog"])))
def test_ppo_loss_gradient_matches_finite_differences(backbone, head, transform):
    torch.manual_seed(0)
    pol = ActorCritic(PolicyConfig(backbone=backbone, head=head, value_transform=transform, **TINY)).double()
    obs, raw, old, adv, target = loss_inputs(pol)
    params = pol.trainable()
    f = lambda: ppo_loss(pol, obs.tokens, obs.mask, obs.action_mask, raw, old, adv, target,
                         clip=0.2, value_coef=0.5, entropy_coef=0.01)[0]
    rng = np.random.default_rng(1)
    coords = [(i, int(rng.integers(p.numel()))) for i, p in enumerate(params) for _ in range(2)]
    errs = fd_gradient_errors(f, params, coords)
    assert errs.max() <= 1e-4


def test_weights_scale_per_sample_loss():
    torch.manual_seed(0)
    pol = ActorCritic(PolicyConfig(backbone="mlp", **TINY)).double()
    obs, raw, old, adv, target = loss_inputs(pol)
    args = (obs.tokens, obs.mask, obs.action_mask, raw, old, adv, target)
    kw = dict(clip=0.2, value_coef=0.5, entropy_coef=0.01)
    base, _ = ppo_loss(pol, *args, **kw)
    doubled, _ = ppo_loss(pol, *args, np.full(6, 2.0), **kw)
    assert doubled.item() == pytest.approx(2 * base.item(), rel=1e-12)


# ---------------------------------------------------------------- update mechanics

def test_task_weights():
    assert np.array_equal(sample_task_weights(4, "off"), np.ones(4))
    w = sample_task_weights(5, "dirichlet", seed=1, update=7)
    assert np.all(w > 0) and w.sum() == pytest.approx(5.0)
    assert np.array_equal(w, sample_task_weights(5, "dirichlet", seed=1, update=7))
    assert not np.array_equal(w, sample_task_weights(5, "dirichlet", seed=1, update=8))
    with pytest.raises(ValueError):
        sample_task_weights(3, "softmax")


def test_dirichlet_weights_average_to_one():
    w = np.stack([sample_task_weights(4, "dirichlet", seed=0, update=u) for u in range(4000)])
    assert np.allclose(w.mean(0), 1.0, atol=0.05)


@given(st.integers(1, 200), st.integers(1, 16), seeds)
def test_minibatches_partition(n, m, seed):
    parts = minibatch_indices(n, m, np.random.default_rng(seed))
    assert sorted(np.concatenate(parts).tolist()) == list(range(n))


def test_stratified_minibatches():
    groups = np.repeat(np.arange(3), 8)
    for part in minibatch_indices(24, 4, np.random.default_rng(0), groups):
        assert np.bincount(groups[part], minlength=3).tolist() == [2, 2, 2]


def bandit_buffer(T=4, N=8):
    """One-token-per-joint buffer where positive raw actions earn positive advantage."""
    venv = VecEnv(EnvConfig(), [(gen_arm3(GenParams(0)), "reach")], N, 0)
    obs = venv.observe()
    buf = RolloutBuffer.empty(T, N, venv.morph_ids)
    rng = np.random.default_rng(0)
    for t in range(T):
        buf.tokens[t], buf.mask[t], buf.action_mask[t] = obs.tokens, obs.mask, obs.action_mask
        raw = np.where(obs.action_mask, rng.choice([-0.04, 0.04], size=obs.action_mask.shape), 0.0)
        buf.raw_action[t] = raw
        buf.reward[t] = raw[:, 1:4].sum(1)
    buf.done[:] = buf.terminated[:] = True
    return buf


def test_ppo_update_moves_towards_rewarded_actions():
    torch.manual_seed(0)
    pol = ActorCritic(PolicyConfig(backbone="mlp", **TINY))
    buf = bandit_buffer()
    with torch.no_grad():
        for t in range(buf.T):
            d, _ = pol(buf.tokens[t], buf.mask[t], buf.action_mask[t])
            buf.log_prob[t] = d.log_prob(torch.as_tensor(buf.raw_action[t][:, :d.action_mask.shape[1]])).numpy()
    cfg = small_rc().train
    mean_before = pol(buf.tokens[0], buf.mask[0], buf.action_mask[0])[0].mean[:, 1:4].mean().item()
    opt = torch.optim.Adam(pol.trainable(), lr=1e-2)
    for _ in range(5):
        ppo_update(pol, opt, buf, cfg, rng=np.random.default_rng(0))
    mean_after = pol(buf.tokens[0], buf.mask[0], buf.action_mask[0])[0].mean[:, 1:4].mean().item()
    assert mean_after > mean_before


@pytest.mark.parametrize("every,expected", [("minibatch", 4), ("update", 1)])
def test_ema_refresh_frequency(every, expected, monkeypatch):
    torch.manual_seed(0)
    pol = ActorCritic(PolicyConfig(backbone="mlp", **TINY))
    calls = []
    monkeypatch.setattr(pol, "ema_update", lambda tau: calls.append(tau))
    cfg = small_rc(ema_every=every, epochs=2, minibatches=2).train
    ppo_update(pol, torch.optim.Adam(pol.trainable()), bandit_buffer(), cfg)
    assert calls == [cfg.ema_tau] * expected


def test_rollout_bootstrap_on_truncation():
    torch.manual_seed(0)
    pol = ActorCritic(PolicyConfig(backbone="mlp", **TINY))
    venv = VecEnv(EnvConfig(horizon=3), [(gen_arm3(GenParams(0)), "reach")], 2, 0)
    buf, obs, log = collect_rollout(pol, venv, venv.observe(), 5, np.random.default_rng(0))
    assert buf.done[:, 0].tolist() == [False, False, True, False, False]
    assert not buf.terminated.any() and len(log.returns) == 2
    # within an episode the next value is the following state's value
    assert np.array_equal(buf.next_value_raw[0], buf.value_raw[1])
    # at the cut it is the EMA value of the final observation, not of the fresh reset state
    assert not np.allclose(buf.next_value_raw[2], buf.value_raw[3])
    assert np.array_equal(buf.next_value_raw[4], pol.ema_value(obs.tokens, obs.mask).numpy())


# ---------------------------------------------------------------- runs

def read_csv(path):
    with open(path) as f:
        return list(csv.DictReader(f))


def test_run_writes_metrics_and_checkpoints(tmp_path):
    rc = small_rc()
    run = prepare_run_dir(rc, tmp_path / "run")
    summary = Trainer(rc, run).run()
    assert summary["steps"] == 256 and summary["updates"] == 8
    rows = read_csv(run / "metrics.csv")
    assert list(rows[0]) == list(METRIC_COLUMNS)
    assert [int(r["step"]) for r in rows] == [128, 256]
    for name in ("step_000000128.npz", "step_000000256.npz", "best.npz", "last.npz"):
        assert (run / "checkpoints" / name).exists()
    assert len(read_csv(run / "updates.csv")) == 8
    with pytest.raises(FileExistsError):
        prepare_run_dir(rc, run)


def test_partial_last_rollout(tmp_path):
    rc = small_rc(total=100, eval_every=1000)
    tr = Trainer(rc, tmp_path)
    tr.run(evaluate_periodically=False)
    assert tr.step == 100


def test_runs_are_bit_identical(tmp_path):
    rc = small_rc("me-tf", n_envs=10, eval_every=160, total=320)
    a, b = prepare_run_dir(rc, tmp_path / "a"), prepare_run_dir(rc, tmp_path / "b")
    Trainer(rc, a).run()
    Trainer(rc, b).run()
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
    assert (a / "updates.csv").read_bytes() == (b / "updates.csv").read_bytes()


def test_resume_matches_uninterrupted(tmp_path):
    rc = small_rc(total=256, eval_every=128)
    full = prepare_run_dir(rc, tmp_path / "full")
    Trainer(rc, full).run()
    # a copy of the finished run rewinds to its midpoint checkpoint and replays the rest
    cut = Path(shutil.copytree(full, tmp_path / "cut"))
    resume(cut, cut / "checkpoints" / "step_000000128.npz")
    assert len(read_csv(cut / "updates.csv")) == len(read_csv(full / "updates.csv"))
    assert (full / "metrics.csv").read_bytes() == (cut / "metrics.csv").read_bytes()


def test_finetune_exact_steps(tmp_path):
    rc = small_rc(total=128, eval_every=128)
    run = prepare_run_dir(rc, tmp_path / "run")
    Trainer(rc, run).run()
    ckpt = run / "checkpoints" / "last.npz"
    target = gen_arm3(GenParams(77), name="other")
    same, step = finetune(ckpt, target, "reach", 0)
    ref, _, _ = load_policy(ckpt)
    assert step == 128
    assert all(torch.equal(a, b) for a, b in zip(same.state_dict().values(), ref.state_dict().values()))
    tuned, step = finetune(ckpt, target, "reach", 90, out=tmp_path / "ft")
    assert step == 128 + 90
    assert (tmp_path / "ft" / "finetuned.npz").exists()
    assert any(not torch.equal(a, b) for a, b in zip(tuned.state_dict().values(), ref.state_dict().values()))
    with pytest.raises(ValueError):
        finetune(ckpt, target, "reach", -1)
