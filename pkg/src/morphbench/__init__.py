"""Multi-embodiment robot manipulation benchmark with morphology-conditioned PPO."""

from .morphology import MAX_LINKS, TOKEN_DIM, Morphology, encode_robot_tokens, load_morphology, save_morphology
from .registry import TASK_NAMES, benchmark_split
from .env import MAX_TOKENS, EnvConfig, ManipulationEnv, VecEnv

__version__ = "0.1.0"
