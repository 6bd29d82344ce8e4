"""AdamW over mixed spectral and dense parameters."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from sct.errors import ConfigError, NumericError

# parameter kind -> optimizer group
KIND_GROUPS = {
    "u": "spectral_factors",
    "v": "spectral_factors",
    "s": "spectral_s",
    "matrix": "dense",
    "vector": "dense",
}
GROUPS = ("spectral_factors", "spectral_s", "dense")
SPECTRAL_LR = 5e-4
DENSE_LR = 2e-5
# u/v are never decayed: retraction would undo the shrink and keep only the distortion
DEFAULT_DECAY_KINDS = frozenset({"s", "matrix"})


@dataclass
class Parameter:
    name: str
    data: np.ndarray
    kind: str
    grad: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind not in KIND_GROUPS:
            raise ConfigError(f"parameter {self.name!r} has unknown kind {self.kind!r}")
        if self.grad is None:
            self.grad = np.zeros_like(self.data)

    @property
    def group(self):
        return KIND_GROUPS[self.kind]

    def zero_grad(self):
        self.grad.fill(0.0)


@dataclass
class OptimConfig:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    decay_applies_to: frozenset = DEFAULT_DECAY_KINDS

    def __post_init__(self):
        self.decay_applies_to = frozenset(self.decay_applies_to)
        if not self.lr >= 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        for name in ("beta1", "beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1), got {getattr(self, name)}")
        if not self.eps > 0:
            raise ConfigError(f"eps must be > 0, got {self.eps}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        unknown = self.decay_applies_to - set(KIND_GROUPS)
        if unknown:
            raise ConfigError(f"unknown parameter kinds in decay_applies_to: {sorted(unknown)}")


def default_group_configs():
    return {
        "spectral_factors": OptimConfig(lr=SPECTRAL_LR),
        "spectral_s": OptimConfig(lr=SPECTRAL_LR),
        "dense": OptimConfig(lr=DENSE_LR),
    }


@dataclass
class AdamState:
    m1: np.ndarray
    m2: np.ndarray
    step_count: int = 0

    @classmethod
    def zeros_like(cls, param):
        return cls(np.zeros_like(param), np.zeros_like(param), 0)


def adamw_step(param, grad, state: AdamState, cfg: OptimConfig, decay=True, lr_scale=1.0, name="param"):
    """One decoupled-weight-decay Adam update, applied to ``param`` in place."""
    if not np.all(np.isfinite(grad)):
        raise NumericError(f"non-finite gradient for parameter {name!r}")
    state.step_count += 1
    t = state.step_count
    b1, b2 = cfg.beta1, cfg.beta2
    state.m1 *= b1
    state.m1 += (1.0 - b1) * grad
    state.m2 *= b2
    state.m2 += (1.0 - b2) * np.square(grad)
    m1_hat = state.m1 / (1.0 - b1**t)
    m2_hat = state.m2 / (1.0 - b2**t)
    update = m1_hat / (np.sqrt(m2_hat) + cfg.eps)
    if decay and cfg.weight_decay:
        update += cfg.weight_decay * param
    param -= (cfg.lr * lr_scale) * update
    return param


class AdamW:
    """AdamW with one OptimConfig per parameter group."""

    def __init__(self, params, group_configs=None, schedule="constant", total_steps=None):
        self.params = list(params)
        self.groups = partition_params(self.params)
        configs = default_group_configs()
        configs.update(group_configs or {})
        unknown = set(configs) - set(GROUPS)
        if unknown:
            raise ConfigError(f"unknown optimizer groups: {sorted(unknown)}")
        self.configs = configs
        if schedule not in ("constant", "linear"):
            raise ConfigError(f"unknown lr schedule {schedule!r}")
        if schedule == "linear" and not total_steps:
            raise ConfigError("linear lr schedule needs total_steps")
        self.schedule = schedule
        self.total_steps = total_steps
        self.state = {p.name: AdamState.zeros_like(p.data) for p in self.params}
        self.steps_taken = 0

    def lr_scale(self):
        if self.schedule == "linear":
            return max(0.0, 1.0 - self.steps_taken / self.total_steps)
        return 1.0

    def step(self):
        scale = self.lr_scale()
        for p in self.params:
            cfg = self.configs[p.group]
            adamw_step(
                p.data,
                p.grad,
                self.state[p.name],
                cfg,
                decay=p.kind in cfg.decay_applies_to,
                lr_scale=scale,
                name=p.name,
            )
        self.steps_taken += 1

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def state_bytes(self):
        return sum(s.m1.nbytes + s.m2.nbytes for s in self.state.values())


def partition_params(params):
    """Split parameters into the spectral_factors / spectral_s / dense groups."""
    groups = {g: [] for g in GROUPS}
    seen = set()
    for p in params:
        if p.kind not in KIND_GROUPS:
            raise ConfigError(f"parameter {p.name!r} has unclassified kind {p.kind!r}")
        if p.name in seen:
            raise ConfigError(f"parameter {p.name!r} listed twice")
        seen.add(p.name)
        groups[p.group].append(p)
    return groups


def group_sizes(groups):
    return {g: sum(p.data.size for p in ps) for g, ps in groups.items()}
