"""Scoring: agent and random-baseline rollouts, MT/ZS aggregation, report files."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .env import MAX_TOKENS, EnvConfig, Observation, VecEnv
from .morphology import Morphology, morphology_digest

REPORT_COLUMNS = ("run", "agent_kind", "task", "split", "morphology", "score", "episodes", "steps")
SUMMARY_FIELDS = ("agent", "task", "MT", "ZS")


@dataclass(frozen=True)
class EvalResult:
    morphology: str
    task: str
    steps: int
    raw: float                 # reach: mean per-step task reward; push: success rate
    baseline: float | None     # random agent's raw value under the same seeds
    score: float               # reach: raw - baseline; push: success rate
    episodes: int
    success_rate: float        # push: goal line crossed; reach: final EE-goal distance <= success radius
    mean_return: float
    mean_final_dist: float


@dataclass(frozen=True)
class RolloutStats:
    steps: int
    mean_task_reward: float
    episodes: int
    successes: int
    mean_return: float
    mean_final_dist: float
    final_dists: tuple[float, ...]


PolicyFn = Callable[[Observation], np.ndarray]


def rollout_stats(policy_fn: PolicyFn, m: Morphology, task: str, env_cfg: EnvConfig, steps: int, seed: int,
                  lanes: int = 10, success_radius: float = 0.10) -> RolloutStats:
    """Run ``steps`` env interactions split over ``lanes`` at the final push threshold."""
    if steps % lanes:
        raise ValueError(f"steps = {steps} must be a multiple of lanes = {lanes}")
    cfg = replace(env_cfg, task=task, curriculum=False)
    venv = VecEnv(cfg, [(m, task)], lanes, seed)
    obs = venv.observe()
    task_sum, returns, dists, successes = 0.0, [], [], 0
    for _ in range(steps // lanes):
        r = venv.step(policy_fn(obs))
        task_sum += float(r.task_reward.sum())
        for k in np.flatnonzero(r.done):
            returns.append(float(r.episode_return[k]))
            d = float(r.ee_goal_dist[k])
            dists.append(d)
            if task == "push":
                successes += bool(r.success[k])
            else:
                successes += d <= success_radius
        obs = r.obs
    n = len(returns)
    return RolloutStats(steps, task_sum / steps, n, successes, float(np.mean(returns)) if n else 0.0,
                        float(np.mean(dists)) if n else float("nan"), tuple(dists))


def policy_actor(policy, seed: int, deterministic: bool = True) -> PolicyFn:
    rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, 0xE7A1]))

    def act(obs: Observation) -> np.ndarray:
        return policy.act(obs, rng, deterministic)[0]
    return act


def random_actor(env_cfg: EnvConfig, seed: int) -> PolicyFn:
    """Uniform movable-joint displacements in [-dq_max, dq_max]."""
    rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, 0x4A4D]))
    from .policy import JOINT_ONEHOT

    def act(obs: Observation) -> np.ndarray:
        oh = obs.tokens[..., JOINT_ONEHOT:JOINT_ONEHOT + 2]
        scale = oh[..., 0] * env_cfg.dq_max_prismatic + oh[..., 1] * env_cfg.dq_max_revolute
        u = rng.uniform(-1.0, 1.0, size=obs.mask.shape)
        return np.where(obs.action_mask, u * scale, 0.0)
    return act


_BASELINE_CACHE: dict[tuple, RolloutStats] = {}


def random_baseline(m: Morphology, task: str, env_cfg: EnvConfig, steps: int = 10_000, seed: int = 0,
                    lanes: int = 10, success_radius: float = 0.10) -> RolloutStats:
    key = (morphology_digest(m), task, seed, steps, lanes, success_radius,
           json.dumps(replace(env_cfg, task=task).to_dict(), sort_keys=True))
    if key not in _BASELINE_CACHE:
        _BASELINE_CACHE[key] = rollout_stats(random_actor(env_cfg, seed), m, task, env_cfg, steps, seed,
                                             lanes, success_radius)
    return _BASELINE_CACHE[key]


def score_stats(agent: RolloutStats, base: RolloutStats | None, m: Morphology, task: str) -> EvalResult:
    success = agent.successes / agent.episodes if agent.episodes else 0.0
    if task == "reach":
        raw = agent.mean_task_reward
        baseline = base.mean_task_reward if base is not None else None
        score = raw - baseline if baseline is not None else raw
    else:
        raw = success
        baseline = base.successes / base.episodes if base is not None and base.episodes else None
        score = success
    return EvalResult(m.name, task, agent.steps, raw, baseline, score, agent.episodes, success,
                      agent.mean_return, agent.mean_final_dist)


def evaluate(policy, m: Morphology, task: str, env_cfg: EnvConfig, steps: int = 10_000, seed: int = 0,
             lanes: int = 10, deterministic: bool = True, success_radius: float = 0.10,
             baseline: bool = True) -> EvalResult:
    """Score one morphology; ``policy`` is an ActorCritic or a callable obs -> actions."""
    actor = policy if callable(policy) and not hasattr(policy, "act") else policy_actor(policy, seed, deterministic)
    stats = rollout_stats(actor, m, task, env_cfg, steps, seed, lanes, success_radius)
    base = random_baseline(m, task, env_cfg, steps, seed, lanes, success_radius) if baseline else None
    return score_stats(stats, base, m, task)


def _mean_score(results: Sequence[EvalResult]) -> float:
    results = list(results)
    if not results:
        raise ValueError("no results to aggregate")
    return float(np.mean([r.score for r in results]))


def mt_score(results: Iterable[EvalResult]) -> float:
    return _mean_score(sorted(results, key=lambda r: r.morphology))


def zs_score(results: Iterable[EvalResult]) -> float:
    return _mean_score(sorted(results, key=lambda r: r.morphology))


# ---------------------------------------------------------------- files

def _fmt(x) -> str:
    return repr(float(x)) if isinstance(x, (float, np.floating)) else str(x)


def report_rows(run: str, agent_kind: str, split_results: dict[str, Sequence[EvalResult]]) -> list[dict]:
    rows = []
    for split in ("train", "test"):
        for r in split_results.get(split, ()):
            rows.append({"run": run, "agent_kind": agent_kind, "task": r.task, "split": split,
                         "morphology": r.morphology, "score": r.score, "episodes": r.episodes, "steps": r.steps})
    return rows


def write_csv(path: Path, columns: Sequence[str], rows: Iterable[dict]) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([_fmt(row[c]) for c in columns])
    Path(path).write_text(buf.getvalue())


def write_series(path: Path, xs, ys) -> None:
    Path(path).write_text("".join(f"{_fmt(x)} {_fmt(y)}\n" for x, y in zip(xs, ys)))


def metrics_series(metrics_csv: Path) -> dict[str, tuple[list[int], list[float]]]:
    """Per-morphology (step, score) series from a metrics log."""
    series: dict[str, tuple[list[int], list[float]]] = {}
    with open(metrics_csv) as f:
        for row in csv.DictReader(f):
            xs, ys = series.setdefault(row["morphology"], ([], []))
            xs.append(int(row["step"]))
            ys.append(float(row["score"]))
    return series


def emit_report(out_dir, *, run: str, agent_kind: str, benchmark: str,
                split_results: dict[str, Sequence[EvalResult]], metrics_csv=None) -> dict[str, Path]:
    """Write report.csv, summary.json and plot-data series; returns the written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"report": out / "report.csv", "summary": out / "summary.json"}
    write_csv(paths["report"], REPORT_COLUMNS, report_rows(run, agent_kind, split_results))
    summary = {
        "agent": agent_kind,
        "task": benchmark,
        "MT": mt_score(split_results["train"]) if split_results.get("train") else None,
        "ZS": zs_score(split_results["test"]) if split_results.get("test") else None,
    }
    paths["summary"].write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    if metrics_csv is not None and Path(metrics_csv).exists():
        plot_dir = out / "plots"
        plot_dir.mkdir(exist_ok=True)
        for name, (xs, ys) in sorted(metrics_series(Path(metrics_csv)).items()):
            p = plot_dir / f"score_{name}.txt"
            write_series(p, xs, ys)
            paths[f"plot:{name}"] = p
    return paths
