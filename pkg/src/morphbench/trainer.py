"""Morphology-conditioned PPO over heterogeneous robot lanes.

Rollouts are gathered from a ``VecEnv`` whose lanes are split evenly across
the training morphologies. GAE bootstraps from the slow (EMA) critic; critic
targets are re-encoded with symlog when that transform is enabled.
"""
from __future__ import annotations

import csv
import json
import math
import shutil
import time
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .config import CONFIG_FILE, RunConfig, TrainConfig, run_config_from_dict
from .env import MAX_TOKENS, EnvConfig, Observation, VecEnv
from .evaluation import EvalResult, evaluate
from .morphology import TOKEN_DIM, Morphology
from .policy import ActorCritic, load_policy, restore_optimizer, save_checkpoint, symexp
from .registry import BenchmarkTask, TaskEntry, benchmark_split

METRIC_COLUMNS = ("step", "morphology", "task", "mean_reward", "success_rate", "score")
UPDATE_COLUMNS = ("update", "step", "loss", "pg_loss", "v_loss", "entropy", "approx_kl", "clip_frac", "lr")

_ACTION_STREAM = 0xAC7
_WEIGHT_STREAM = 0x7A5C
_MINIBATCH_STREAM = 0x3B17


# ---------------------------------------------------------------- buffer

@dataclass
class RolloutBuffer:
    tokens: np.ndarray          # (T, N, MAX_TOKENS, TOKEN_DIM) float32
    mask: np.ndarray            # (T, N, MAX_TOKENS) bool
    action_mask: np.ndarray     # (T, N, MAX_TOKENS) bool
    raw_action: np.ndarray      # (T, N, MAX_TOKENS) bin index or Gaussian sample
    log_prob: np.ndarray        # (T, N)
    reward: np.ndarray          # (T, N)
    value_raw: np.ndarray       # (T, N) EMA critic output, transform space
    next_value_raw: np.ndarray  # (T, N) EMA critic on the state after each step
    terminated: np.ndarray      # (T, N) bool
    done: np.ndarray            # (T, N) bool, terminated or truncated
    morph_ids: np.ndarray       # (N,)

    @classmethod
    def empty(cls, T: int, N: int, morph_ids) -> "RolloutBuffer":
        f = lambda *s: np.zeros(s, dtype=np.float64)
        return cls(np.zeros((T, N, MAX_TOKENS, TOKEN_DIM), np.float32), np.zeros((T, N, MAX_TOKENS), bool),
                   np.zeros((T, N, MAX_TOKENS), bool), np.zeros((T, N, MAX_TOKENS), np.float32),
                   f(T, N), f(T, N), f(T, N), f(T, N), np.zeros((T, N), bool), np.zeros((T, N), bool),
                   np.asarray(morph_ids).copy())

    @property
    def T(self) -> int:
        return self.reward.shape[0]

    @property
    def N(self) -> int:
        return self.reward.shape[1]


@dataclass
class EpisodeLog:
    returns: list
    task_rewards: list
    successes: list


def collect_rollout(policy: ActorCritic, venv: VecEnv, obs: Observation, T: int, rng: np.random.Generator,
                    progress_fn=None) -> tuple[RolloutBuffer, Observation, EpisodeLog]:
    """Step every lane ``T`` times with stochastic actions; returns (buffer, next obs, finished episodes)."""
    N = venv.n_envs
    buf = RolloutBuffer.empty(T, N, venv.morph_ids)
    log = EpisodeLog([], [], [])
    for t in range(T):
        if progress_fn is not None:
            venv.set_progress(progress_fn(t))
        dq, raw, lp, _ = policy.act(obs, rng, deterministic=False)
        buf.tokens[t] = obs.tokens
        buf.mask[t] = obs.mask
        buf.action_mask[t] = obs.action_mask
        buf.raw_action[t] = raw
        buf.log_prob[t] = lp
        buf.value_raw[t] = policy.ema_value(obs.tokens, obs.mask).numpy()
        r = venv.step(dq)
        buf.reward[t] = r.reward
        buf.terminated[t] = r.terminated
        buf.done[t] = r.done
        if t > 0:
            trunc_prev = buf.done[t - 1] & ~buf.terminated[t - 1]
            buf.next_value_raw[t - 1] = np.where(trunc_prev, buf.next_value_raw[t - 1], buf.value_raw[t])
        trunc = np.flatnonzero(r.truncated)
        if len(trunc):
            fo = r.final_obs.select(trunc)
            buf.next_value_raw[t, trunc] = policy.ema_value(fo.tokens, fo.mask).numpy()
        for k in np.flatnonzero(r.done):
            log.returns.append(float(r.episode_return[k]))
            log.task_rewards.append(float(r.episode_task_reward[k]))
            log.successes.append(bool(r.success[k]))
        obs = r.obs
    last = policy.ema_value(obs.tokens, obs.mask).numpy()
    # lanes that truncated on the final step already hold their bootstrap
    keep = buf.done[T - 1] & ~buf.terminated[T - 1]
    buf.next_value_raw[T - 1] = np.where(keep, buf.next_value_raw[T - 1], last)
    return buf, obs, log


# ---------------------------------------------------------------- advantages

def gae(rewards, values, next_values, terminated, done, gamma: float, lam: float):
    """GAE over (T, N) arrays with explicit next-state values.

    ``terminated`` cuts the bootstrap, ``done`` (terminated or truncated) cuts
    the recursion. Truncated steps keep ``next_values`` as their bootstrap.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    T = rewards.shape[0]
    adv = np.zeros_like(rewards)
    acc = np.zeros(rewards.shape[1:])
    for t in range(T - 1, -1, -1):
        delta = rewards[t] + gamma * (1.0 - terminated[t]) * next_values[t] - values[t]
        acc = delta + gamma * lam * (1.0 - done[t]) * acc
        adv[t] = acc
    return adv, adv + values


def compute_gae(buffer: RolloutBuffer, gamma: float, lam: float, policy: ActorCritic | None = None,
                transform: str | None = None):
    """(advantages, decoded value targets) for a buffer; values are symexp-decoded when needed."""
    if transform is None:
        transform = policy.cfg.value_transform if policy is not None else "identity"
    dec = symexp if transform == "symlog" else (lambda v: v)
    return gae(buffer.reward, dec(buffer.value_raw), dec(buffer.next_value_raw),
               buffer.terminated.astype(float), buffer.done.astype(float), gamma, lam)


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    return (adv - adv.mean()) / (adv.std() + 1e-8)


# ---------------------------------------------------------------- weights

def sample_task_weights(n_morphs: int, mode: str = "off", seed: int = 0, update: int = 0) -> np.ndarray:
    if n_morphs < 1:
        raise ValueError("need at least one morphology")
    if mode == "off":
        return np.ones(n_morphs)
    if mode != "dirichlet":
        raise ValueError(f"unknown reweighting mode {mode!r}")
    rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, _WEIGHT_STREAM, update]))
    return rng.dirichlet(np.ones(n_morphs)) * n_morphs


# ---------------------------------------------------------------- loss

def ppo_loss(policy: ActorCritic, tokens, mask, action_mask, raw, old_logp, adv, target_enc,
             weights=None, *, clip: float, value_coef: float, entropy_coef: float):
    """Total clipped-PPO loss over a minibatch plus detached diagnostics.

    ``target_enc`` is already in the critic's output space. ``weights`` scales
    each sample's loss (None means unweighted).
    """
    dist, value = policy(tokens, mask, action_mask)
    T = dist.action_mask.shape[1]
    raw = torch.as_tensor(raw)[:, :T]
    if dist.kind == "continuous":
        raw = raw.to(value.dtype)
    logp = dist.log_prob(raw)
    old_logp = torch.as_tensor(old_logp, dtype=value.dtype)
    adv = torch.as_tensor(adv, dtype=value.dtype)
    ratio = torch.exp(logp - old_logp)
    pg = -torch.minimum(ratio * adv, torch.clamp(ratio, 1 - clip, 1 + clip) * adv)
    vl = (value - torch.as_tensor(target_enc, dtype=value.dtype)) ** 2
    ent = dist.entropy()
    per = pg + value_coef * vl - entropy_coef * ent
    if weights is not None:
        per = per * torch.as_tensor(weights, dtype=value.dtype)
    loss = per.mean()
    with torch.no_grad():
        stats = {
            "loss": float(loss), "pg_loss": float(pg.mean()), "v_loss": float(vl.mean()),
            "entropy": float(ent.mean()), "approx_kl": float((old_logp - logp).mean()),
            "clip_frac": float(((ratio - 1).abs() > clip).double().mean()),
        }
    return loss, stats


def minibatch_indices(n: int, minibatches: int, rng: np.random.Generator, groups: np.ndarray | None = None):
    """Partition ``range(n)`` into minibatches; with ``groups``, each one draws evenly from every group."""
    if groups is None:
        return np.array_split(rng.permutation(n), minibatches)
    parts = [np.array_split(rng.permutation(np.flatnonzero(groups == g)), minibatches) for g in np.unique(groups)]
    return [np.concatenate([p[k] for p in parts]) for k in range(minibatches)]


def ppo_update(policy: ActorCritic, optimizer: torch.optim.Optimizer, buffer: RolloutBuffer, cfg: TrainConfig,
               task_weights: np.ndarray | None = None, rng: np.random.Generator | None = None) -> dict:
    """One PPO update pass (epochs x minibatches) followed by the slow-critic refresh."""
    T, N = buffer.T, buffer.N
    adv, targets = compute_gae(buffer, cfg.gamma, cfg.gae_lambda, policy)
    adv = normalize_advantages(adv)
    target_enc = policy.encode_target(targets)
    flat = lambda a: a.reshape((T * N,) + a.shape[2:])
    tokens, mask, amask, raw = map(flat, (buffer.tokens, buffer.mask, buffer.action_mask, buffer.raw_action))
    old_lp, adv, target_enc = flat(buffer.log_prob), flat(adv), flat(target_enc)
    morph = np.broadcast_to(buffer.morph_ids, (T, N)).reshape(-1)
    weights = None
    if task_weights is not None and cfg.reweighting != "off":
        weights = np.asarray(task_weights, dtype=float)[morph]
    rng = rng if rng is not None else np.random.default_rng(np.random.SeedSequence([cfg.seed, _MINIBATCH_STREAM]))
    n_mb = min(cfg.minibatches, T * N)
    sums: dict[str, float] = {}
    count = 0
    for _ in range(cfg.epochs):
        for idx in minibatch_indices(T * N, n_mb, rng, morph if cfg.morph_balanced else None):
            loss, st = ppo_loss(policy, tokens[idx], mask[idx], amask[idx], raw[idx], old_lp[idx], adv[idx],
                                target_enc[idx], None if weights is None else weights[idx],
                                clip=cfg.clip, value_coef=cfg.value_coef, entropy_coef=cfg.entropy_coef)
            if not math.isfinite(st["loss"]):
                raise FloatingPointError(f"non-finite PPO loss: {st}")
            optimizer.zero_grad()
            loss.backward()
            if cfg.max_grad_norm > 0:
                torch.nn.utils.clip_grad_norm_(policy.trainable(), cfg.max_grad_norm)
            optimizer.step()
            if cfg.ema_every == "minibatch":
                policy.ema_update(cfg.ema_tau)
            for k, v in st.items():
                sums[k] = sums.get(k, 0.0) + v
            count += 1
    if cfg.ema_every == "update" and cfg.epochs > 0:
        policy.ema_update(cfg.ema_tau)
    return {k: v / count for k, v in sums.items()} if count else {}


# ---------------------------------------------------------------- run plumbing

def make_optimizer(policy: ActorCritic, cfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam(policy.trainable(), lr=cfg.lr)


def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def _append_rows(path: Path, columns, rows) -> None:
    new = not path.exists()
    with open(path, "a", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        if new:
            w.writerow(columns)
        for row in rows:
            w.writerow([_fmt(row[c]) for c in columns])


def _truncate_log(path: Path, max_step: int, key: str = "step") -> None:
    """Drop rows logged after ``max_step`` so a resumed run appends cleanly."""
    if not path.exists():
        return
    with open(path) as f:
        rows = list(csv.reader(f))
    if not rows:
        return
    col = rows[0].index(key)
    kept = [rows[0]] + [r for r in rows[1:] if int(r[col]) <= max_step]
    with open(path, "w", newline="") as f:
        csv.writer(f, lineterminator="\n").writerows(kept)


def train_entries(rc: RunConfig, bench: BenchmarkTask | None = None) -> list[TaskEntry]:
    bench = bench or benchmark_split(rc.benchmark, rc.seed)
    bench = bench.with_task(rc.task)
    entries = list(bench.train)
    if rc.agent == "se":
        entries = [bench.find(rc.morphology)] if rc.morphology else entries[:1]
    return entries


def env_config_for(rc: RunConfig, bench: BenchmarkTask | None = None) -> EnvConfig:
    obstacles = rc.obstacles or (bench.obstacles if bench is not None else False)
    return replace(rc.env, obstacles=obstacles)


def _set_torch_determinism() -> None:
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)


class Trainer:
    """Owns the policy, optimizer, env lanes and run directory for one training run."""

    def __init__(self, rc: RunConfig, run_dir: Path | str | None, *, entries: Sequence[TaskEntry] | None = None,
                 policy: ActorCritic | None = None, log=None):
        _set_torch_determinism()
        self.rc, self.cfg = rc, rc.train
        self.run_dir = Path(run_dir) if run_dir is not None else None
        if self.run_dir is not None:
            self.ckpt_dir = self.run_dir / "checkpoints"
            self.metrics_path = self.run_dir / "metrics.csv"
            self.updates_path = self.run_dir / "updates.csv"
        self.log = log or (lambda msg: None)
        bench = None
        if entries is None:
            bench = benchmark_split(rc.benchmark, rc.seed)
            entries = train_entries(rc, bench)
        self.entries = list(entries)
        self.env_cfg = env_config_for(rc, bench)
        n_envs = self.cfg.n_envs
        if n_envs % len(self.entries):
            raise ValueError(f"n_envs = {n_envs} must be a multiple of the {len(self.entries)} training morphologies")
        torch.manual_seed(rc.seed)
        self.policy = policy if policy is not None else ActorCritic(rc.policy)
        self.optimizer = make_optimizer(self.policy, self.cfg)
        self.venv = VecEnv(self.env_cfg, [(e.morphology, e.task) for e in self.entries], n_envs, rc.seed)
        self.obs = self.venv.observe()
        if self.policy.normalizer is not None and float(self.policy.normalizer.count) == 0:
            self.policy.update_normalizer(self.obs.tokens, self.obs.mask)
        self.rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([rc.seed & 0xFFFFFFFF, _ACTION_STREAM])))
        self.mb_rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([rc.seed & 0xFFFFFFFF, _MINIBATCH_STREAM])))
        self.step = 0
        self.update = 0
        self.next_eval = self.cfg.eval_every
        self.best_score = -math.inf
        self.last_eval_step = -1

    # -- schedule
    def n_updates(self, total: int | None = None) -> int:
        total = self.cfg.total_env_steps if total is None else total
        return math.ceil(total / (self.cfg.n_envs * self.cfg.rollout_T))

    def rollout_length(self, total: int) -> int:
        remaining = total - self.step
        return min(self.cfg.rollout_T, math.ceil(remaining / self.cfg.n_envs))

    def _lr(self, total: int) -> float:
        if self.cfg.lr_schedule == "linear":
            return self.cfg.lr * max(0.0, 1.0 - self.step / max(total, 1))
        return self.cfg.lr

    # -- one iteration
    def iterate(self, total: int) -> dict:
        T = self.rollout_length(total)
        N = self.cfg.n_envs
        base = self.step
        progress = lambda t: min(1.0, (base + t * N) / max(total, 1))
        for g in self.optimizer.param_groups:
            g["lr"] = self._lr(total)
        buf, self.obs, _ = collect_rollout(self.policy, self.venv, self.obs, T, self.rng, progress)
        self.step += T * N
        weights = sample_task_weights(len(self.entries), self.cfg.reweighting, self.rc.seed, self.update)
        stats = ppo_update(self.policy, self.optimizer, buf, self.cfg, weights, self.mb_rng)
        # input statistics move only between updates, so stored log-probs stay exact
        self.policy.update_normalizer(buf.tokens, buf.mask)
        self.update += 1
        row = {"update": self.update, "step": self.step, "lr": self.optimizer.param_groups[0]["lr"]}
        row.update({k: stats.get(k, float("nan")) for k in UPDATE_COLUMNS if k not in row})
        if self.run_dir is not None:
            _append_rows(self.updates_path, UPDATE_COLUMNS, [row])
        return stats

    # -- evaluation and checkpoints
    def evaluate_all(self) -> list[EvalResult]:
        c = self.cfg
        return [evaluate(self.policy, e.morphology, e.task, self.env_cfg, steps=c.eval_steps, seed=self.rc.seed,
                         lanes=c.eval_lanes, success_radius=c.success_radius) for e in self.entries]

    def _eval_and_log(self) -> float:
        results = self.evaluate_all()
        rows = [{"step": self.step, "morphology": r.morphology, "task": r.task, "mean_reward": r.mean_return,
                 "success_rate": r.success_rate, "score": r.score} for r in results]
        _append_rows(self.metrics_path, METRIC_COLUMNS, rows)
        score = float(np.mean([r.score for r in results]))
        self.last_eval_step = self.step
        self.save(self.ckpt_dir / f"step_{self.step:09d}.npz")
        if score > self.best_score:
            self.best_score = score
            self.save(self.ckpt_dir / "best.npz")
        self.log(f"step {self.step}: mean score {score:.4f} (best {self.best_score:.4f})")
        return score

    def state_extra(self) -> dict:
        return {
            "update": self.update, "next_eval": self.next_eval, "best_score": self.best_score,
            "last_eval_step": self.last_eval_step, "rng": self.rng.bit_generator.state,
            "mb_rng": self.mb_rng.bit_generator.state, "env": self.venv.state_dict(),
            "morphologies": [e.name for e in self.entries],
        }

    def save(self, path: Path) -> None:
        path.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(path, self.policy, step=self.step, config=self.rc.to_dict(), optimizer=self.optimizer,
                        extra=self.state_extra())

    def restore(self, path: Path) -> None:
        policy, meta, arrays = load_policy(path, expect=self.rc.policy)
        self.policy.load_state_dict(policy.state_dict())
        restore_optimizer(self.optimizer, meta, arrays)
        ex = meta["extra"]
        if ex.get("morphologies") != [e.name for e in self.entries]:
            raise ValueError("checkpoint was trained on a different morphology set")
        self.step = int(meta["step"])
        self.update = int(ex["update"])
        self.next_eval = int(ex["next_eval"])
        self.best_score = float(ex["best_score"])
        self.last_eval_step = int(ex["last_eval_step"])
        self.rng.bit_generator.state = ex["rng"]
        self.mb_rng.bit_generator.state = ex["mb_rng"]
        self.venv.load_state_dict(ex["env"])
        self.obs = self.venv.observe()
        _truncate_log(self.metrics_path, self.step)
        _truncate_log(self.updates_path, self.step)

    # -- main loop
    def run(self, total: int | None = None, evaluate_periodically: bool = True) -> dict:
        total = self.cfg.total_env_steps if total is None else total
        self.run_dir.mkdir(parents=True, exist_ok=True)
        t0 = time.time()
        try:
            while self.step < total:
                self.iterate(total)
                if evaluate_periodically and self.step >= self.next_eval:
                    # advance first so the checkpoint written by the evaluation resumes cleanly
                    while self.next_eval <= self.step:
                        self.next_eval += self.cfg.eval_every
                    self._eval_and_log()
            if evaluate_periodically and self.last_eval_step != self.step:
                self._eval_and_log()
        finally:
            self.save(self.ckpt_dir / "last.npz")
        return {"steps": self.step, "updates": self.update, "best_score": self.best_score,
                "seconds": time.time() - t0}


# ---------------------------------------------------------------- entry points

def prepare_run_dir(rc: RunConfig, run_dir: Path | str | None = None, force: bool = False) -> Path:
    run_dir = Path(run_dir) if run_dir is not None else Path(rc.out_dir) / rc.name
    if run_dir.exists() and any(run_dir.iterdir()):
        if not force:
            raise FileExistsError(f"run directory {run_dir} already exists (use --force to replace it)")
        shutil.rmtree(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / CONFIG_FILE).write_text(rc.dumps())
    return run_dir


def train(rc: RunConfig, run_dir: Path | str | None = None, force: bool = False, log=None) -> Path:
    """Fresh training run; returns the run directory."""
    run_dir = prepare_run_dir(rc, run_dir, force)
    Trainer(rc, run_dir, log=log).run()
    return run_dir


def resume(run_dir: Path | str, checkpoint: Path | str | None = None, log=None) -> Path:
    """Continue a run from a checkpoint (default: the latest step checkpoint)."""
    run_dir = Path(run_dir)
    rc = run_config_from_dict(json.loads((run_dir / CONFIG_FILE).read_text()))
    tr = Trainer(rc, run_dir, log=log)
    if checkpoint is None:
        steps = sorted((run_dir / "checkpoints").glob("step_*.npz"))
        if not steps:
            raise FileNotFoundError(f"no step checkpoints in {run_dir}")
        checkpoint = steps[-1]
    tr.restore(Path(checkpoint))
    tr.run()
    return run_dir


def _largest_divisor_at_most(n: int, cap: int) -> int:
    for d in range(min(n, cap), 0, -1):
        if n % d == 0:
            return d
    return 1


def finetune(checkpoint: Path | str, morphology: Morphology, task: str, steps: int,
             rc: RunConfig | None = None, out: Path | str | None = None) -> tuple[ActorCritic, int]:
    """Continue PPO on one morphology for exactly ``steps`` interactions.

    Returns (policy, step counter). ``rc`` defaults to the config stored in the
    checkpoint; the optimizer state is carried over when present.
    """
    _set_torch_determinism()
    if steps < 0:
        raise ValueError("steps must be >= 0")
    policy, meta, arrays = load_policy(checkpoint)
    rc = rc or run_config_from_dict(meta["config"])
    if rc.policy != policy.cfg:
        raise ValueError("checkpoint policy config does not match the run config")
    start = int(meta["step"])
    if steps == 0:
        return policy, start
    lanes = _largest_divisor_at_most(steps, rc.train.finetune_envs)
    per_lane = steps // lanes
    T = _largest_divisor_at_most(per_lane, rc.train.rollout_T)
    mb = _largest_divisor_at_most(lanes * T, rc.train.minibatches)
    cfg = replace(rc.train, n_envs=lanes, rollout_T=T, minibatches=mb, total_env_steps=steps, reweighting="off")
    ft_rc = replace(rc, train=cfg)
    if out is not None:
        Path(out).mkdir(parents=True, exist_ok=True)
    tr = Trainer(ft_rc, out, entries=[TaskEntry(morphology, task)], policy=policy)
    restore_optimizer(tr.optimizer, meta, arrays)
    while tr.step < steps:
        tr.iterate(steps)
    if out is not None:
        tr.step = start + steps
        tr.save(Path(out) / "finetuned.npz")
    return tr.policy, start + steps
