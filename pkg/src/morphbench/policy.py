"""Morphology-conditioned actor-critic networks over link tokens."""
from __future__ import annotations

import copy
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
from torch import nn

from .env import MAX_TOKENS
from .morphology import SLOTS, TOKEN_DIM

JOINT_ONEHOT = SLOTS["joint_onehot"].start  # prismatic, revolute, fixed


@dataclass(frozen=True)
class PolicyConfig:
    backbone: str = "transformer"
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    ff_width: int = 128
    mlp_hidden: tuple[int, ...] = (256, 256)
    head: str = "continuous"
    n_bins: int = 11
    delta_min: float = 0.001
    dq_max_revolute: float = 0.05
    dq_max_prismatic: float = 0.02
    value_transform: str = "identity"
    shared_encoder: bool = True
    normalize_tokens: bool = True         # running per-slot standardisation of encoder inputs
    log_std_init: float = math.log(0.5)   # relative to each joint's dq_max

    def __post_init__(self):
        problems = []
        if self.backbone not in ("mlp", "transformer"):
            problems.append("backbone must be 'mlp' or 'transformer'")
        if self.head not in ("continuous", "discrete"):
            problems.append("head must be 'continuous' or 'discrete'")
        if self.value_transform not in ("identity", "symlog"):
            problems.append("value_transform must be 'identity' or 'symlog'")
        if self.d_model <= 0 or self.n_layers < 1 or self.ff_width <= 0 or not self.mlp_hidden:
            problems.append("layer sizes must be positive")
        if self.backbone == "transformer" and self.d_model % self.n_heads:
            problems.append("d_model must be divisible by n_heads")
        if self.n_bins < 3 or self.n_bins % 2 == 0:
            problems.append("n_bins must be odd and >= 3")
        if not 0 < self.delta_min <= min(self.dq_max_revolute, self.dq_max_prismatic):
            problems.append("delta_min must be in (0, dq_max]")
        if problems:
            raise ValueError("invalid PolicyConfig: " + "; ".join(problems))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "PolicyConfig":
        d = dict(d)
        if "mlp_hidden" in d:
            d["mlp_hidden"] = tuple(d["mlp_hidden"])
        return cls(**d)


# ---------------------------------------------------------------- value transform

def symlog(x):
    if isinstance(x, torch.Tensor):
        return torch.sign(x) * torch.log1p(torch.abs(x))
    x = np.asarray(x, dtype=float)
    return np.sign(x) * np.log1p(np.abs(x))


def symexp(y):
    if isinstance(y, torch.Tensor):
        return torch.sign(y) * torch.expm1(torch.abs(y))
    y = np.asarray(y, dtype=float)
    return np.sign(y) * np.expm1(np.abs(y))


def discretize_bins(n_bins: int, delta_min: float, dq_max: float) -> np.ndarray:
    """Zero plus +-delta_min * r^i, i < (B-1)/2, with r chosen so the outermost bin is dq_max."""
    if n_bins < 3 or n_bins % 2 == 0:
        raise ValueError("n_bins must be odd and >= 3")
    if not 0 < delta_min <= dq_max:
        raise ValueError(f"infeasible bins: delta_min = {delta_min} vs dq_max = {dq_max}")
    k = (n_bins - 1) // 2
    if delta_min == dq_max and k > 1:
        raise ValueError("delta_min == dq_max only allows 3 bins")
    r = (dq_max / delta_min) ** (1.0 / (k - 1)) if k > 1 else 1.0
    pos = delta_min * r ** np.arange(k)
    pos[-1] = dq_max
    return np.concatenate([-pos[::-1], [0.0], pos])


# ---------------------------------------------------------------- distributions

class ActionDistribution:
    """Per-slot action distribution; slots outside ``action_mask`` always emit 0."""

    def __init__(self, kind: str, action_mask: torch.Tensor, *, mean=None, std=None, logits=None, bins=None):
        self.kind = kind
        self.action_mask = action_mask
        self.mean, self.std = mean, std
        self.logits, self.bins = logits, bins
        if kind == "discrete":
            zero = logits.shape[-1] // 2
            forced = torch.full_like(logits, -1e9)
            forced[..., zero] = 0.0
            self.logits = torch.where(action_mask[..., None], logits, forced)
            self.log_probs = torch.log_softmax(self.logits, dim=-1)

    @property
    def probs(self) -> torch.Tensor:
        return torch.exp(self.log_probs)

    def log_prob(self, raw: torch.Tensor) -> torch.Tensor:
        """Joint log-likelihood over movable slots; ``raw`` is bin indices or Gaussian samples."""
        m = self.action_mask
        if self.kind == "discrete":
            lp = torch.gather(self.log_probs, -1, raw.long()[..., None])[..., 0]
        else:
            z = (raw - self.mean) / self.std
            lp = -0.5 * z * z - torch.log(self.std) - 0.5 * math.log(2 * math.pi)
        return torch.where(m, lp, torch.zeros_like(lp)).sum(-1)

    def entropy(self) -> torch.Tensor:
        m = self.action_mask
        if self.kind == "discrete":
            p = self.probs
            ent = -(p * torch.where(p > 0, self.log_probs, torch.zeros_like(p))).sum(-1)
        else:
            ent = 0.5 + 0.5 * math.log(2 * math.pi) + torch.log(self.std)
        return torch.where(m, ent, torch.zeros_like(ent)).sum(-1)

    def values(self, raw: torch.Tensor) -> torch.Tensor:
        """Joint displacements for raw samples (zero on masked slots)."""
        if self.kind == "discrete":
            v = torch.gather(self.bins, -1, raw.long()[..., None])[..., 0]
        else:
            v = raw
        return torch.where(self.action_mask, v, torch.zeros_like(v))

    @torch.no_grad()
    def sample(self, rng: np.random.Generator | None, deterministic: bool = False):
        """Returns (dq values, raw samples, log_prob) using a numpy stream for the noise."""
        if self.kind == "discrete":
            if deterministic:
                raw = torch.argmax(self.logits, dim=-1)
            else:
                u = torch.as_tensor(rng.random(self.logits.shape[:-1]), dtype=self.logits.dtype)
                cdf = torch.cumsum(self.probs, dim=-1)
                raw = torch.clamp((cdf < u[..., None]).sum(-1), max=self.logits.shape[-1] - 1)
        else:
            if deterministic:
                raw = self.mean.clone()
            else:
                eps = torch.as_tensor(rng.standard_normal(self.mean.shape), dtype=self.mean.dtype)
                raw = self.mean + self.std * eps
            raw = torch.where(self.action_mask, raw, torch.zeros_like(raw))
        return self.values(raw), raw, self.log_prob(raw)


# ---------------------------------------------------------------- backbones

class Attention(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        self.h, self.dh = heads, d // heads
        self.qkv = nn.Linear(d, 3 * d)
        self.out = nn.Linear(d, d)

    def forward(self, x, key_mask):
        N, T, d = x.shape
        q, k, v = self.qkv(x).view(N, T, 3, self.h, self.dh).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.dh)
        scores = scores.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        att = torch.softmax(scores, dim=-1)
        return self.out((att @ v).transpose(1, 2).reshape(N, T, d))


class EncoderLayer(nn.Module):
    def __init__(self, d, heads, ff):
        super().__init__()
        self.ln1, self.ln2 = nn.LayerNorm(d), nn.LayerNorm(d)
        self.att = Attention(d, heads)
        self.ff = nn.Sequential(nn.Linear(d, ff), nn.GELU(), nn.Linear(ff, d))

    def forward(self, x, mask):
        x = x + self.att(self.ln1(x), mask)
        return x + self.ff(self.ln2(x))


class TokenNormalizer(nn.Module):
    """Running mean/variance of the 48 token slots over valid (unmasked) tokens."""

    def __init__(self, clip: float = 5.0):
        super().__init__()
        self.clip = clip
        self.register_buffer("count", torch.zeros((), dtype=torch.float64))
        self.register_buffer("mean", torch.zeros(TOKEN_DIM, dtype=torch.float64))
        self.register_buffer("var", torch.ones(TOKEN_DIM, dtype=torch.float64))

    @torch.no_grad()
    def update(self, tokens, mask) -> None:
        x = torch.as_tensor(np.asarray(tokens)[np.asarray(mask, dtype=bool)], dtype=torch.float64)
        if len(x) == 0:
            return
        n, m, v = float(len(x)), x.mean(0), x.var(0, unbiased=False)
        tot = self.count + n
        delta = m - self.mean
        self.mean += delta * n / tot
        self.var.copy_((self.var * self.count + v * n + delta ** 2 * self.count * n / tot) / tot)
        self.count.copy_(tot)

    def forward(self, tokens):
        if float(self.count) == 0:
            return tokens
        z = (tokens - self.mean.to(tokens.dtype)) / torch.sqrt(self.var.to(tokens.dtype) + 1e-8)
        return torch.clamp(z, -self.clip, self.clip)


class TokenTransformer(nn.Module):
    """Returns per-token features and a masked mean-pooled summary."""

    def __init__(self, cfg: PolicyConfig):
        super().__init__()
        self.embed = nn.Linear(TOKEN_DIM, cfg.d_model)
        self.layers = nn.ModuleList(EncoderLayer(cfg.d_model, cfg.n_heads, cfg.ff_width) for _ in range(cfg.n_layers))
        self.ln = nn.LayerNorm(cfg.d_model)
        self.out_dim = cfg.d_model

    def forward(self, tokens, mask):
        x = self.embed(tokens)
        for layer in self.layers:
            x = layer(x, mask)
        x = self.ln(x)
        w = mask.to(x.dtype)[..., None]
        pooled = (x * w).sum(1) / w.sum(1).clamp(min=1.0)
        return x, pooled


class TokenMLP(nn.Module):
    """Embeds each token, zeroes padded slots, flattens all MAX_TOKENS slots."""

    def __init__(self, cfg: PolicyConfig):
        super().__init__()
        self.embed = nn.Linear(TOKEN_DIM, cfg.d_model)
        layers, width = [], MAX_TOKENS * cfg.d_model
        for h in cfg.mlp_hidden:
            layers += [nn.Linear(width, h), nn.Tanh()]
            width = h
        self.trunk = nn.Sequential(*layers)
        self.out_dim = width

    def forward(self, tokens, mask):
        x = self.embed(tokens) * mask.to(tokens.dtype)[..., None]
        return None, self.trunk(x.flatten(1))


def _backbone(cfg):
    return TokenTransformer(cfg) if cfg.backbone == "transformer" else TokenMLP(cfg)


class Critic(nn.Module):
    def __init__(self, cfg: PolicyConfig, encoder: nn.Module):
        super().__init__()
        self.encoder = encoder
        self.head = nn.Linear(encoder.out_dim, 1)

    def forward(self, tokens, mask):
        return self.head(self.encoder(tokens, mask)[1])[..., 0]


class ActorCritic(nn.Module):
    def __init__(self, cfg: PolicyConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = _backbone(cfg)
        out = self.encoder.out_dim
        width = 1 if cfg.head == "continuous" else cfg.n_bins
        if cfg.backbone == "transformer":
            self.actor_head = nn.Linear(out, width)
        else:
            self.actor_head = nn.Linear(out, MAX_TOKENS * width)
        self.critic = Critic(cfg, self.encoder if cfg.shared_encoder else _backbone(cfg))
        if cfg.head == "continuous":
            self.log_std = nn.Parameter(torch.full((MAX_TOKENS,), float(cfg.log_std_init)))
        bins_r = discretize_bins(cfg.n_bins, cfg.delta_min, cfg.dq_max_revolute)
        bins_p = discretize_bins(cfg.n_bins, cfg.delta_min, cfg.dq_max_prismatic)
        self.register_buffer("bins_table", torch.tensor(np.stack([bins_p, bins_r, np.zeros(cfg.n_bins)])),
                             persistent=False)
        self.normalizer = TokenNormalizer() if cfg.normalize_tokens else None
        self.ema_critic = copy.deepcopy(self.critic)
        for p in self.ema_critic.parameters():
            p.requires_grad_(False)

    # -- helpers
    def trainable(self):
        return [p for n, p in self.named_parameters() if not n.startswith("ema_critic.")]

    def _trim(self, tokens, mask, action_mask):
        if self.cfg.backbone == "transformer":
            T = int(mask.sum(-1).max())
            return tokens[:, :T], mask[:, :T], action_mask[:, :T]
        return tokens, mask, action_mask

    def _as_tensors(self, tokens, mask, action_mask):
        dt = next(self.parameters()).dtype
        return (torch.as_tensor(tokens, dtype=dt), torch.as_tensor(mask, dtype=torch.bool),
                torch.as_tensor(action_mask, dtype=torch.bool))

    def _norm(self, tokens):
        return self.normalizer(tokens) if self.normalizer is not None else tokens

    def update_normalizer(self, tokens, mask) -> None:
        if self.normalizer is not None:
            self.normalizer.update(tokens, mask)

    def dq_scale(self, tokens):
        onehot = tokens[..., JOINT_ONEHOT:JOINT_ONEHOT + 2]
        return onehot[..., 0] * self.cfg.dq_max_prismatic + onehot[..., 1] * self.cfg.dq_max_revolute

    # -- main
    def forward(self, tokens, mask, action_mask):
        """Returns (ActionDistribution over the first T slots, raw value)."""
        tokens, mask, action_mask = self._as_tensors(tokens, mask, action_mask)
        full_T = tokens.shape[1]
        tokens, mask, action_mask = self._trim(tokens, mask, action_mask)
        feats = self._norm(tokens)
        per_token, summary = self.encoder(feats, mask)
        if self.cfg.shared_encoder:
            value = self.critic.head(summary)[..., 0]
        else:
            value = self.critic(feats, mask)
        N, T = mask.shape
        if per_token is not None:
            h = self.actor_head(per_token)
        else:
            h = self.actor_head(summary).view(N, MAX_TOKENS, -1)[:, :T]
        scale = self.dq_scale(tokens)
        action_mask = action_mask & (scale > 0)
        if self.cfg.head == "continuous":
            safe = torch.where(action_mask, scale, torch.ones_like(scale))
            mean = safe * torch.tanh(h[..., 0])
            std = safe * torch.exp(self.log_std[:T]).expand(N, T)
            dist = ActionDistribution("continuous", action_mask, mean=mean, std=std)
        else:
            onehot = tokens[..., JOINT_ONEHOT:JOINT_ONEHOT + 3]
            kind = torch.where(onehot.sum(-1) > 0, onehot.argmax(-1), torch.full_like(mask, 2, dtype=torch.long))
            bins = self.bins_table.to(tokens.dtype)[kind]
            dist = ActionDistribution("discrete", action_mask, logits=h, bins=bins)
        dist.n_slots = full_T
        return dist, value

    @torch.no_grad()
    def ema_value(self, tokens, mask):
        tokens, mask, _ = self._as_tensors(tokens, mask, np.zeros(np.shape(mask), dtype=bool))
        if self.cfg.backbone == "transformer":
            T = int(mask.sum(-1).max())
            tokens, mask = tokens[:, :T], mask[:, :T]
        return self.ema_critic(self._norm(tokens), mask)

    def decode_value(self, raw):
        return symexp(raw) if self.cfg.value_transform == "symlog" else raw

    def encode_target(self, target):
        return symlog(target) if self.cfg.value_transform == "symlog" else target

    @torch.no_grad()
    def ema_update(self, tau: float) -> None:
        ema_update(self.critic, self.ema_critic, tau)

    @torch.no_grad()
    def act(self, obs, rng, deterministic=False):
        """Numpy in, numpy out: (dq per MAX_TOKENS slot, raw, log_prob, raw value)."""
        dist, value = self(obs.tokens, obs.mask, obs.action_mask)
        dq, raw, lp = dist.sample(rng, deterministic)
        out = np.zeros((dq.shape[0], MAX_TOKENS))
        out[:, :dq.shape[1]] = dq.numpy()
        raw_full = np.zeros((dq.shape[0], MAX_TOKENS))
        raw_full[:, :raw.shape[1]] = raw.numpy()
        return out, raw_full, lp.numpy(), value.numpy()


def ema_update(critic: nn.Module, ema: nn.Module, tau: float) -> None:
    """ema <- tau * ema + (1 - tau) * critic, parameter by parameter."""
    src, dst = dict(critic.named_parameters()), dict(ema.named_parameters())
    if src.keys() != dst.keys():
        raise ValueError("EMA and critic parameter sets differ")
    with torch.no_grad():
        for name, p in dst.items():
            if p.shape != src[name].shape:
                raise ValueError(f"shape mismatch for {name}: {tuple(p.shape)} vs {tuple(src[name].shape)}")
            p.mul_(tau).add_(src[name].detach(), alpha=1.0 - tau)


# ---------------------------------------------------------------- checkpoints

CHECKPOINT_VERSION = 1


def save_checkpoint(path, policy: ActorCritic, *, step: int, config: dict, optimizer=None,
                    extra: dict | None = None) -> None:
    """Single .npz: JSON metadata plus named row-major weight arrays."""
    arrays = {}
    for name, t in policy.state_dict().items():
        arrays[f"w/{name}"] = t.detach().cpu().numpy()
    meta = {"version": CHECKPOINT_VERSION, "step": int(step), "config": config,
            "policy": policy.cfg.to_dict(), "extra": extra or {}}
    if optimizer is not None:
        st = optimizer.state_dict()
        meta["optimizer"] = {"param_groups": st["param_groups"], "keys": {}}
        for idx, s in st["state"].items():
            keys = []
            for k, v in s.items():
                arrays[f"opt/{idx}/{k}"] = v.detach().cpu().numpy() if isinstance(v, torch.Tensor) else np.asarray(v)
                keys.append(k)
            meta["optimizer"]["keys"][str(idx)] = keys
    arrays["meta"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    with np.load(path, allow_pickle=False) as z:
        arrays = {k: z[k] for k in z.files}
    meta = json.loads(arrays.pop("meta").tobytes().decode())
    if meta.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {meta.get('version')}")
    return meta, arrays


def load_policy(path, expect: PolicyConfig | None = None) -> tuple[ActorCritic, dict, dict]:
    meta, arrays = read_checkpoint(path)
    cfg = PolicyConfig.from_dict(meta["policy"])
    if expect is not None and expect != cfg:
        raise ValueError("checkpoint policy config does not match the requested config")
    policy = ActorCritic(cfg)
    state = policy.state_dict()
    for name, t in state.items():
        a = arrays.get(f"w/{name}")
        if a is None:
            raise ValueError(f"checkpoint is missing weight {name}")
        if tuple(a.shape) != tuple(t.shape):
            raise ValueError(f"shape mismatch for {name}: checkpoint {a.shape}, config {tuple(t.shape)}")
        state[name] = torch.as_tensor(a)
    policy.load_state_dict(state)
    return policy, meta, arrays


def restore_optimizer(optimizer, meta: dict, arrays: dict) -> None:
    if "optimizer" not in meta:
        return
    om = meta["optimizer"]
    state = {int(idx): {k: torch.as_tensor(arrays[f"opt/{idx}/{k}"]) for k in keys}
             for idx, keys in om["keys"].items()}
    optimizer.load_state_dict({"state": state, "param_groups": om["param_groups"]})
