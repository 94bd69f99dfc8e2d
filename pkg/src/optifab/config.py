"""Experiment configuration: one canonical-JSON file, validated before any work starts."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

from optifab import wire
from optifab.optimizer.core import OptimizerConfig
from optifab.problems import ProblemSpec
from optifab.runners.base import RunnerConfig
from optifab.tasks import DEFAULT_MAX_ATTEMPTS, DEFAULT_TIMEOUT

CHANNEL_TRANSPORTS = ("local", "tcp")
CONSUMER_MODES = ("push", "poll", "auto")


class ConfigError(ValueError):
    """Invalid configuration; the message starts with the offending field path."""


@dataclass
class TaskConfig:
    max_attempts: int = DEFAULT_MAX_ATTEMPTS
    timeout: float = DEFAULT_TIMEOUT

    def validate(self) -> None:
        if self.max_attempts < 1:
            raise ValueError("task.max_attempts: must be >= 1")
        if self.timeout <= 0:
            raise ValueError("task.timeout: must be > 0")


@dataclass
class HypervolumeConfig:
    ref: list[float] | None = None
    samples: int = 200_000
    seed: int = 0
    lower: list[float] | None = None

    def resolved_ref(self, m: int) -> list[float]:
        return list(self.ref) if self.ref is not None else [1.1] * m

    def resolved_lower(self, m: int) -> list[float]:
        return list(self.lower) if self.lower is not None else [0.0] * m

    def validate(self, m: int) -> None:
        for name in ("ref", "lower"):
            value = getattr(self, name)
            if value is not None and len(value) != m:
                raise ValueError(f"hv.{name}: needs {m} values, got {len(value)}")
        if self.ref is not None and self.lower is not None:
            if any(lo >= r for lo, r in zip(self.lower, self.ref)):
                raise ValueError("hv.lower: must lie strictly below hv.ref")
        if self.samples < 1000:
            raise ValueError("hv.samples: must be >= 1000")


@dataclass
class ChannelConfig:
    """``local`` consumes straight from the embedded broker; ``tcp`` serves it on
    ``address`` and routes both publishers and the consumer through sockets."""

    transport: str = "local"
    mode: str = "push"
    address: str = "127.0.0.1:0"

    def validate(self) -> None:
        if self.transport not in CHANNEL_TRANSPORTS:
            raise ValueError(f"channel.transport: must be one of {CHANNEL_TRANSPORTS}")
        if self.mode not in CONSUMER_MODES:
            raise ValueError(f"channel.mode: must be one of {CONSUMER_MODES}")
        try:
            wire.parse_address(self.address)
        except ValueError as exc:
            raise ValueError(f"channel.address: {exc}") from None


@dataclass
class ExperimentConfig:
    problem: ProblemSpec
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    runner: RunnerConfig = field(default_factory=RunnerConfig)
    task: TaskConfig = field(default_factory=TaskConfig)
    hv: HypervolumeConfig = field(default_factory=HypervolumeConfig)
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    experiment_id: str = "exp"
    journal_path: str = "journal.jsonl"
    report_dir: str = "reports"

    def validate(self) -> None:
        try:
            if not self.experiment_id or ":" in self.experiment_id or "/" in self.experiment_id:
                raise ValueError("experiment_id: must be non-empty without ':' or '/'")
            self.problem.validate()
            self.optimizer.validate(self.problem.n)
            self.runner.validate()
            self.task.validate()
            self.hv.validate(self.problem.m)
            self.channel.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def to_dict(self) -> dict:
        return {
            "experiment_id": self.experiment_id,
            "problem": self.problem.to_dict(),
            "optimizer": dataclasses.asdict(self.optimizer),
            "runner": self.runner.to_dict(),
            "task": dataclasses.asdict(self.task),
            "hv": dataclasses.asdict(self.hv),
            "channel": dataclasses.asdict(self.channel),
            "journal_path": self.journal_path,
            "report_dir": self.report_dir,
        }

    def replace(self, **sections) -> "ExperimentConfig":
        """Copy with some fields of nested sections overridden, e.g.
        ``replace(runner={"concurrency": 4})``."""
        data = self.to_dict()
        for key, value in sections.items():
            if isinstance(value, dict) and isinstance(data.get(key), dict):
                data[key] = {**data[key], **value}
            else:
                data[key] = value
        return ExperimentConfig.from_dict(data)

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        if not isinstance(data, dict):
            raise ConfigError("config: top level must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        for key in data:
            if key not in known:
                raise ConfigError(f"{key}: unknown field")
        if "problem" not in data:
            raise ConfigError("problem: required")
        try:
            problem = ProblemSpec.from_dict(data["problem"])
        except KeyError as exc:
            raise ConfigError(f"problem.{exc.args[0]}: required") from None
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"problem: {exc}") from None
        kwargs = {"problem": problem}
        sections = {"optimizer": OptimizerConfig, "runner": RunnerConfig, "task": TaskConfig,
                    "hv": HypervolumeConfig, "channel": ChannelConfig}
        for name, klass in sections.items():
            if name in data:
                kwargs[name] = _build(klass, name, data[name])
        for name in ("experiment_id", "journal_path", "report_dir"):
            if name in data:
                if not isinstance(data[name], str):
                    raise ConfigError(f"{name}: must be a string")
                kwargs[name] = data[name]
        config = cls(**kwargs)
        config.validate()
        return config

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        path = Path(path)
        try:
            data = wire.decode(path.read_bytes())
        except OSError as exc:
            raise ConfigError(f"config: cannot read {path}: {exc.strerror}") from None
        except ValueError as exc:
            raise ConfigError(f"config: {path} is not valid JSON: {exc}") from None
        config = cls.from_dict(data)
        base = path.parent
        if not Path(config.journal_path).is_absolute() and "journal_path" in data:
            config.journal_path = str(base / config.journal_path)
        if not Path(config.report_dir).is_absolute() and "report_dir" in data:
            config.report_dir = str(base / config.report_dir)
        return config

    def save(self, path: str | Path) -> None:
        Path(path).write_bytes(wire.encode(self.to_dict()) + b"\n")


def _build(klass, section: str, values):
    if not isinstance(values, dict):
        raise ConfigError(f"{section}: must be a JSON object")
    fields = {f.name: f for f in dataclasses.fields(klass)}
    for key in values:
        if key not in fields:
            raise ConfigError(f"{section}.{key}: unknown field")
    try:
        return klass(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{section}: {exc}") from None
