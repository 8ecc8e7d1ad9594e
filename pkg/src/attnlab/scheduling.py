"""Step windows, block gates, and the combined modulation gate.

Steps are 1-based with t=1 the highest-noise step. The normalized position is
phi(t) = (t-1)/(T-1), defined as 0 for T=1; a window [low, high] is inclusive
at both ends. Block gates are 0/1 flags per attention block. The combined gate
g = m(t) * b(l) * (gamma - 1) feeds the scaling factor 1 + g.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .attention import (
    AttentionResult,
    KeyPartition,
    ModulationConfig,
    apply_group_scaling,
    attention_forward,
    energy_gamma,
    scaled_logits,
)


@dataclass(frozen=True)
class StepWindow:
    low: float = 0.0
    high: float = 0.30

    def __post_init__(self):
        if not 0.0 <= self.low <= self.high <= 1.0:
            raise ValueError(
                f"window must satisfy 0 <= low <= high <= 1, got [{self.low}, {self.high}]"
            )


WINDOW_PRESETS = {
    "early": StepWindow(0.0, 0.30),
    "middle": StepWindow(0.35, 0.65),
    "late": StepWindow(0.70, 1.00),
    "all": StepWindow(0.0, 1.0),
}

DEFAULT_WINDOW = WINDOW_PRESETS["early"]


def window_preset(name: str) -> StepWindow:
    key = name.strip().lower()
    if key not in WINDOW_PRESETS:
        raise ValueError(
            f"unknown window preset {name!r}; valid presets: {sorted(WINDOW_PRESETS)}"
        )
    return WINDOW_PRESETS[key]


def step_fraction(t: int, total_steps: int) -> float:
    """phi(t) = (t-1)/(T-1); 0.0 for the single-step schedule."""
    if total_steps < 1:
        raise ValueError(f"total_steps must be >= 1, got {total_steps}")
    if not 1 <= t <= total_steps:
        raise ValueError(f"step t={t} out of range 1..{total_steps}")
    if total_steps == 1:
        return 0.0
    return (t - 1) / (total_steps - 1)


def step_mask(t: int, total_steps: int, window: StepWindow) -> int:
    """1 if phi(t) lands inside the window (endpoints inclusive), else 0."""
    phi = step_fraction(t, total_steps)
    return int(window.low <= phi <= window.high)


def active_steps(total_steps: int, window: StepWindow) -> tuple[int, ...]:
    """All 1-based steps whose phi(t) lies in the window."""
    return tuple(
        t for t in range(1, total_steps + 1) if step_mask(t, total_steps, window)
    )


@dataclass(frozen=True)
class BlockGateTable:
    """Per-block 0/1 gate flags, index l = 0..L-1."""

    gates: tuple[int, ...]

    def __post_init__(self):
        g = tuple(int(x) for x in self.gates)
        if not g:
            raise ValueError("gate table must cover at least one block")
        if any(x not in (0, 1) for x in g):
            raise ValueError("gates must be 0 or 1")
        object.__setattr__(self, "gates", g)

    @property
    def num_blocks(self) -> int:
        return len(self.gates)

    @property
    def selected(self) -> tuple[int, ...]:
        return tuple(l for l, g in enumerate(self.gates) if g == 1)

    @classmethod
    def from_selected(cls, selected, num_blocks: int) -> "BlockGateTable":
        sel = {int(l) for l in selected}
        bad = [l for l in sel if not 0 <= l < num_blocks]
        if bad:
            raise ValueError(f"selected block(s) {sorted(bad)} out of range 0..{num_blocks - 1}")
        return cls(tuple(1 if l in sel else 0 for l in range(num_blocks)))

    @classmethod
    def first_half(cls, num_blocks: int) -> "BlockGateTable":
        """Gate the leading floor(L/2) blocks — the depth heuristic default."""
        if num_blocks < 1:
            raise ValueError(f"num_blocks must be >= 1, got {num_blocks}")
        half = num_blocks // 2
        return cls(tuple(1 if l < half else 0 for l in range(num_blocks)))

    @classmethod
    def uniform(cls, num_blocks: int, on: bool = True) -> "BlockGateTable":
        if num_blocks < 1:
            raise ValueError(f"num_blocks must be >= 1, got {num_blocks}")
        return cls((1 if on else 0,) * num_blocks)


def block_gate(foreground_ratio: float, tau: float, gamma: float) -> float:
    """gamma if the block's foreground ratio strictly exceeds tau, else 1."""
    if not 0.0 <= foreground_ratio <= 1.0:
        raise ValueError(f"foreground_ratio must be in [0, 1], got {foreground_ratio}")
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must be in [0, 1], got {tau}")
    if gamma <= 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    return gamma if foreground_ratio > tau else 1.0


def combined_gate(step_flag: int, block_flag: int, gamma: float) -> float:
    """g = m * b * (gamma - 1); the applied factor is 1 + g."""
    if step_flag not in (0, 1):
        raise ValueError(f"step flag must be 0 or 1, got {step_flag}")
    if block_flag not in (0, 1):
        raise ValueError(f"block flag must be 0 or 1, got {block_flag}")
    if gamma <= 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    return step_flag * block_flag * (gamma - 1.0)


@dataclass(frozen=True)
class ScheduleConfig:
    """Full schedule: step window x block gates x modulation settings."""

    gates: BlockGateTable
    total_steps: int = 25
    window: StepWindow = DEFAULT_WINDOW
    modulation: ModulationConfig = field(default_factory=ModulationConfig)

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError(f"total_steps must be >= 1, got {self.total_steps}")

    @property
    def num_blocks(self) -> int:
        return self.gates.num_blocks

    def is_active(self, block: int, t: int) -> bool:
        if not 0 <= block < self.num_blocks:
            raise ValueError(f"block {block} out of range 0..{self.num_blocks - 1}")
        return bool(
            step_mask(t, self.total_steps, self.window) and self.gates.gates[block]
        )


def scheduled_attention(
    block: int,
    t: int,
    q,
    k,
    v,
    partition: KeyPartition,
    config: ScheduleConfig,
    d_k: int | None = None,
) -> AttentionResult:
    """Attention at (block, t) under the schedule.

    When the combined gate is zero the call reduces to the plain forward pass
    on the same code path, so the result is bit-identical to an unscheduled
    call. In energy mode the coefficient is derived from this call's own
    unscaled logits and is only computed when the gate is active.
    """
    if config.is_active(block, t):
        mod = config.modulation
        if mod.mode == "energy":
            gamma = energy_gamma(scaled_logits(q, k, d_k), mod.gamma_max, mod.kappa)
        else:
            gamma = mod.gamma
        g = combined_gate(1, 1, gamma)
        if g != 0.0:
            q2, k2 = apply_group_scaling(q, k, partition, mod.targets, 1.0 + g)
            return attention_forward(q2, k2, v, d_k)
    return attention_forward(q, k, v, d_k)
