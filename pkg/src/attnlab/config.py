"""Run configuration: schema-validated JSON in, resolved schedule objects out.

The schema ships as package data (data/config.schema.json) and rejects unknown
keys, so a typo'd field fails loudly instead of silently using a default.
Serialization materializes every field; parse -> serialize -> parse is the
identity on the resulting object.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from importlib import resources

import jsonschema

from .attention import ArchMode, ModulationConfig, resolve_targets
from .calibration import load_block_fixture
from .scheduling import BlockGateTable, ScheduleConfig, StepWindow, window_preset


class ConfigError(ValueError):
    """Invalid run configuration (schema violation or inconsistent values)."""


def _schema() -> dict:
    text = resources.files("attnlab").joinpath("data/config.schema.json").read_text()
    return json.loads(text)


_SCHEMA = _schema()


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    draws: int = 200
    samples: int = 50
    probes: int = 120
    gamma: float = 1.35
    gamma_max: float = 1.5
    kappa: float = 1.0
    mode: str = "scalar"
    arch: str = "joint"
    position: str = "Key-image and Key-text"
    tau: float = 0.5
    high_quantile: float = 0.2
    total_steps: int = 25
    num_blocks: int = 8
    boost: float = 2.0
    window: dict = field(default_factory=lambda: {"preset": "early"})
    block_gates: dict = field(default_factory=lambda: {"source": "first_half"})
    dims: dict = field(
        default_factory=lambda: {
            "n_text": 4,
            "n_image": 6,
            "n_video": 8,
            "d_k": 8,
            "d_v": 6,
        }
    )
    alpha_grid: tuple | None = None
    out_dir: str | None = None
    format: str = "csv"

    def __post_init__(self):
        if self.alpha_grid is not None:
            object.__setattr__(self, "alpha_grid", tuple(float(a) for a in self.alpha_grid))
        object.__setattr__(self, "window", dict(self.window))
        object.__setattr__(self, "block_gates", dict(self.block_gates))
        object.__setattr__(self, "dims", dict(self.dims))

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        try:
            jsonschema.validate(instance=data, schema=_SCHEMA)
        except jsonschema.ValidationError as e:
            path = "/".join(str(p) for p in e.absolute_path) or "<root>"
            raise ConfigError(f"config invalid at {path}: {e.message}") from None
        merged = {f: getattr(cls(), f) for f in cls.__dataclass_fields__}
        for key in ("window", "block_gates", "dims"):
            if key in data:
                base = dict(merged[key])
                base.update(data[key])
                merged[key] = base
        for key, value in data.items():
            if key not in ("window", "block_gates", "dims"):
                merged[key] = value
        cfg = cls(**merged)
        cfg.resolved_window()
        cfg.resolved_gates()
        cfg.modulation()
        return cfg

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        with open(path, "r", encoding="utf-8") as f:
            try:
                data = json.load(f)
            except json.JSONDecodeError as e:
                raise ConfigError(f"config is not valid JSON: {e}") from None
        if not isinstance(data, dict):
            raise ConfigError("config root must be a JSON object")
        return cls.from_dict(data)

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["alpha_grid"] is not None:
            d["alpha_grid"] = list(d["alpha_grid"])
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def replace(self, **updates) -> "RunConfig":
        d = self.to_dict()
        d.update(updates)
        return RunConfig.from_dict(d)

    # -- resolution to domain objects ------------------------------------

    def resolved_window(self) -> StepWindow:
        w = self.window
        has_explicit = "low" in w or "high" in w
        if has_explicit:
            if not ("low" in w and "high" in w):
                raise ConfigError("explicit window needs both 'low' and 'high'")
            try:
                return StepWindow(float(w["low"]), float(w["high"]))
            except ValueError as e:
                raise ConfigError(str(e)) from None
        preset = w.get("preset", "early")
        try:
            return window_preset(preset)
        except ValueError as e:
            raise ConfigError(str(e)) from None

    def resolved_gates(self) -> BlockGateTable:
        g = self.block_gates
        source = g.get("source", "first_half")
        try:
            if source == "first_half":
                return BlockGateTable.first_half(self.num_blocks)
            if source == "all":
                return BlockGateTable.uniform(self.num_blocks, on=True)
            if source == "none":
                return BlockGateTable.uniform(self.num_blocks, on=False)
            if source == "fixture":
                if "name" not in g:
                    raise ConfigError("block_gates source 'fixture' needs 'name'")
                fx = load_block_fixture(g["name"])
                return BlockGateTable.from_selected(fx.blocks, fx.num_blocks)
            if source == "explicit":
                if "gates" not in g:
                    raise ConfigError("block_gates source 'explicit' needs 'gates'")
                return BlockGateTable(tuple(g["gates"]))
        except ConfigError:
            raise
        except ValueError as e:
            raise ConfigError(str(e)) from None
        raise ConfigError(f"unknown block_gates source {source!r}")

    def modulation(self) -> ModulationConfig:
        try:
            arch = ArchMode.parse(self.arch)
            targets = resolve_targets(arch, self.position)
            return ModulationConfig(
                mode=self.mode,
                gamma=self.gamma,
                gamma_max=self.gamma_max,
                kappa=self.kappa,
                targets=targets,
                arch=arch,
            )
        except ValueError as e:
            raise ConfigError(str(e)) from None

    def schedule(self) -> ScheduleConfig:
        gates = self.resolved_gates()
        try:
            return ScheduleConfig(
                gates=gates,
                total_steps=self.total_steps,
                window=self.resolved_window(),
                modulation=self.modulation(),
            )
        except ValueError as e:
            raise ConfigError(str(e)) from None
