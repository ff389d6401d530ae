"""Benchmark registry: shipped arm descriptors and the train/test splits."""
from __future__ import annotations

import functools
import json
import os
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .morphology import Morphology, load_morphology
from .procgen import GenParams, attach_end_effector, gen_arm3, gen_primitive_category, scale_arm

ASSET_VERSION = 1
ASSETS_ENV = "MORPHBENCH_ASSETS"
TASK_NAMES = ("arm3", "panda", "ee_arm", "ee_task", "prims", "arms")
TASK_KINDS = ("reach", "push")

ARM3_TEST_OFFSET = 999  # reserved seed offset for the held-out arm3 variation
PANDA_SCALE_RANGE = (0.8, 1.25)
CHAIN_DOF = 5


def default_assets_root() -> Path:
    env = os.environ.get(ASSETS_ENV)
    return Path(env) if env else Path(__file__).resolve().parent / "assets"


class AssetStore:
    """Read-only view of one versioned asset directory."""

    def __init__(self, root: Path | str | None = None, version: int = ASSET_VERSION):
        self.root = Path(root) if root is not None else default_assets_root()
        self.dir = self.root / f"v{version}"
        path = self.dir / "manifest.json"
        if not path.exists():
            raise FileNotFoundError(f"asset manifest not found: {path}")
        self.manifest = json.loads(path.read_text())
        if self.manifest.get("version") != version:
            raise ValueError(f"asset manifest version {self.manifest.get('version')} != {version}")

    @property
    def names(self) -> list[str]:
        return sorted(self.manifest["assets"])

    def split_spec(self, task: str) -> dict:
        return self.manifest.get("tasks", {}).get(task, {})

    @functools.lru_cache(maxsize=None)
    def load(self, name: str) -> Morphology:
        try:
            rel = self.manifest["assets"][name]
        except KeyError:
            raise KeyError(f"unknown asset {name!r}; available: {', '.join(self.names)}") from None
        return load_morphology((self.dir / rel).read_text())


@functools.lru_cache(maxsize=4)
def _store(root: str | None) -> AssetStore:
    return AssetStore(root)


def get_store(root: Path | str | None = None) -> AssetStore:
    return _store(str(root) if root is not None else str(default_assets_root()))


@dataclass(frozen=True)
class TaskEntry:
    morphology: Morphology
    task: str

    def __post_init__(self):
        if self.task not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.task!r}")

    @property
    def name(self) -> str:
        return self.morphology.name


def same_structure(a: Morphology, b: Morphology) -> bool:
    return a.links == b.links and a.joints == b.joints


@dataclass(frozen=True)
class BenchmarkTask:
    name: str
    train: tuple[TaskEntry, ...]
    test: tuple[TaskEntry, ...]
    obstacles: bool = False

    def __post_init__(self):
        if not self.train or not self.test:
            raise ValueError(f"{self.name}: train and test splits must be non-empty")
        for t in self.test:
            for e in self.train:
                if same_structure(t.morphology, e.morphology):
                    raise ValueError(f"{self.name}: test morphology {t.name} duplicates train {e.name}")
        names = [e.name for e in self.train + self.test]
        if len(set(names)) != len(names):
            raise ValueError(f"{self.name}: morphology names must be unique")

    def entries(self, split: str) -> tuple[TaskEntry, ...]:
        if split not in ("train", "test"):
            raise ValueError(f"split must be 'train' or 'test', got {split!r}")
        return self.train if split == "train" else self.test

    def find(self, name: str) -> TaskEntry:
        for e in self.train + self.test:
            if e.name == name:
                return e
        raise KeyError(f"{self.name}: no morphology named {name!r}")

    def with_task(self, kind: str | None) -> "BenchmarkTask":
        """Force every entry onto one task kind (None keeps the split's own kinds)."""
        if kind is None:
            return self
        retask = lambda es: tuple(TaskEntry(e.morphology, kind) for e in es)
        return replace(self, train=retask(self.train), test=retask(self.test))

    def with_obstacles(self, flag: bool) -> "BenchmarkTask":
        return replace(self, obstacles=bool(flag))


def _seed_int(*parts) -> int:
    return int(np.random.SeedSequence([int(p) & 0xFFFFFFFF for p in parts]).generate_state(1)[0])


def arm3_split(seed: int) -> BenchmarkTask:
    train = tuple(TaskEntry(gen_arm3(GenParams(seed * 1000 + k), name=f"arm3-{k}"), "reach") for k in range(10))
    test = (TaskEntry(gen_arm3(GenParams(seed * 1000 + ARM3_TEST_OFFSET), name="arm3-test"), "reach"),)
    return BenchmarkTask("arm3", train, test)


def panda_split(seed: int, store: AssetStore) -> BenchmarkTask:
    base = store.load("panda")
    rng = np.random.default_rng(np.random.SeedSequence([seed & 0xFFFFFFFF, 0x9A4DA]))
    train = []
    for k in range(10):
        s = rng.uniform(*PANDA_SCALE_RANGE, size=(base.n_links, 1))
        scaled = scale_arm(base, np.repeat(s, 3, axis=1))
        train.append(TaskEntry(scaled.renamed(f"panda-s{k}"), "reach"))
    return BenchmarkTask("panda", tuple(train), (TaskEntry(base, "reach"),))


def _prims_arm(seed: int) -> Morphology:
    return gen_primitive_category("prims", GenParams(seed), name="prims")


def _compose(spec: dict, seed: int, store: AssetStore) -> TaskEntry:
    arm = _prims_arm(seed) if spec["arm"] == "prims" else store.load(spec["arm"])
    ee = spec.get("ee")
    if ee is not None:
        arm = attach_end_effector(arm, store.load(ee) if ee in store.manifest["assets"] else ee)
    return TaskEntry(arm, spec.get("task", "reach"))


def _manifest_split(name: str, seed: int, store: AssetStore) -> BenchmarkTask:
    spec = store.split_spec(name)
    if not spec:
        raise KeyError(f"asset manifest has no split for {name!r}")
    train = tuple(_compose(s, seed, store) for s in spec["train"])
    test = tuple(_compose(s, seed, store) for s in spec["test"])
    return BenchmarkTask(name, train, test)


def prims_split(seed: int) -> BenchmarkTask:
    train = tuple(TaskEntry(gen_primitive_category(k, GenParams(seed), name=k), "reach")
                  for k in ("stick", "nlink", "prims"))
    chain = gen_primitive_category("chain", GenParams(seed, dof=CHAIN_DOF), name="chain")
    return BenchmarkTask("prims", train, (TaskEntry(chain, "reach"),))


def benchmark_split(name: str, seed: int = 0, assets_root: Path | str | None = None) -> BenchmarkTask:
    if name not in TASK_NAMES:
        raise KeyError(f"unknown benchmark task {name!r}; expected one of {', '.join(TASK_NAMES)}")
    if name == "arm3":
        return arm3_split(seed)
    if name == "prims":
        return prims_split(seed)
    store = get_store(assets_root)
    if name == "panda":
        return panda_split(seed, store)
    return _manifest_split(name, seed, store)
