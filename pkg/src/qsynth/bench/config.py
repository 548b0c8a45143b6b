"""Experiment configuration: sectioned ``key = value`` files and manifest replay.

A config file looks like::

    [experiment]
    mode = one-stage
    seed = 0
    repetitions = 3

    [env]
    n = 2
    lam = 2

    [ppo]
    total_steps = 200000

Every key is optional. Unknown sections or keys, and values that do not
parse, raise :class:`ConfigError` carrying the offending line number. A JSON
manifest written by a previous run is accepted in place of a config file and
reproduces that run's resolved configuration.
"""
from __future__ import annotations

import configparser
import dataclasses
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from ..env import EnvConfig
from ..errors import DomainError
from ..train import MODES, TWO_STAGE_LR, A2cConfig, PpoConfig, RefineConfig

BENCH_MODES = MODES + ("baseline",)


class ConfigError(ValueError):
    def __init__(self, message: str, path: str | None = None, line: int | None = None):
        self.path = path
        self.line = line
        where = path or ("<config>" if line is not None else "")
        if line is not None:
            where = f"{where}:{line}"
        super().__init__(f"{where}: {message}" if where else message)


@dataclass
class ExperimentSection:
    mode: str = "one-stage"
    seed: int = 0
    repetitions: int = 3
    output_dir: str = "runs"
    target: str = ""
    eval_targets: str = "16"
    eval_episodes: int = 64
    eval_every: int = 0
    hidden: int = 64
    checkpoint_every: int = 0


@dataclass
class EnvSection:
    n: int = 2
    lam: int = 2
    epsilon: float = 0.01
    terminal_bonus: float = 1.0
    reward_clip: float = 1.0


@dataclass
class LandscapeSection:
    lambda_list: str = "1,2,3"
    n_list: str = "2,3"


@dataclass
class BaselineSection:
    n: int = 2
    lam: int = 2
    targets: int = 10
    steps: int = 300
    lr: float = 0.1
    layers: int = 2
    seed: int = 0
    init: str = "uniform"


SECTIONS: dict[str, type] = {
    "experiment": ExperimentSection,
    "env": EnvSection,
    "ppo": PpoConfig,
    "a2c": A2cConfig,
    "refine": RefineConfig,
    "landscape": LandscapeSection,
    "baseline": BaselineSection,
}


@dataclass
class ExperimentConfig:
    experiment: ExperimentSection = field(default_factory=ExperimentSection)
    env: EnvSection = field(default_factory=EnvSection)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    a2c: A2cConfig = field(default_factory=A2cConfig)
    refine: RefineConfig = field(default_factory=RefineConfig)
    landscape: LandscapeSection = field(default_factory=LandscapeSection)
    baseline: BaselineSection = field(default_factory=BaselineSection)
    source: str | None = None

    @property
    def mode(self) -> str:
        return self.experiment.mode

    def env_config(self, n: int | None = None, lam: int | None = None) -> EnvConfig:
        e = self.env
        return EnvConfig(
            n=e.n if n is None else n,
            lam=e.lam if lam is None else lam,
            epsilon=e.epsilon,
            terminal_bonus=e.terminal_bonus,
            reward_clip=e.reward_clip,
        )

    @property
    def lambda_list(self) -> list[int]:
        return _int_list(self.landscape.lambda_list, "landscape.lambda_list")

    @property
    def n_list(self) -> list[int]:
        return _int_list(self.landscape.n_list, "landscape.n_list")

    @property
    def corpus_path(self) -> Path | None:
        spec = self.experiment.eval_targets.strip()
        return None if spec.isdigit() else Path(spec)

    @property
    def eval_target_count(self) -> int:
        spec = self.experiment.eval_targets.strip()
        return int(spec) if spec.isdigit() else 0

    def to_dict(self) -> dict[str, dict[str, Any]]:
        return {name: dataclasses.asdict(getattr(self, name)) for name in SECTIONS}


def _int_list(text: str, key: str) -> list[int]:
    try:
        values = [int(tok) for tok in re.split(r"[,\s]+", text.strip()) if tok]
    except ValueError:
        raise ConfigError(f"{key} must be a comma-separated list of integers, got {text!r}") from None
    if not values:
        raise ConfigError(f"{key} is empty")
    return values


def _convert(raw: Any, default: Any) -> Any:
    if isinstance(default, bool):
        if isinstance(raw, bool):
            return raw
        key = str(raw).strip().lower()
        if key not in configparser.ConfigParser.BOOLEAN_STATES:
            raise ValueError(f"expected a boolean, got {raw!r}")
        return configparser.ConfigParser.BOOLEAN_STATES[key]
    if isinstance(default, int):
        if isinstance(raw, float) and not raw.is_integer():
            raise ValueError(f"expected an integer, got {raw!r}")
        return int(raw) if not isinstance(raw, str) else int(raw.replace("_", ""))
    if isinstance(default, float):
        return float(raw)
    return str(raw)


def _key_lines(text: str) -> dict[tuple[str, str], int]:
    """Map ``(section, key)`` to 1-based line numbers, for diagnostics."""
    lines: dict[tuple[str, str], int] = {}
    section = ""
    for i, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        m = re.match(r"\[([^\]]+)\]", stripped)
        if m:
            section = m.group(1).strip().lower()
            lines[(section, "")] = i
            continue
        m = re.match(r"([^=:#;\s][^=:]*?)\s*[=:]", stripped)
        if m:
            lines[(section, m.group(1).strip().lower())] = i
    return lines


def _blame(factory, kwargs: dict[str, Any]) -> str:
    """The first key that fails validation on its own, or "" if only a combination does."""
    for key, value in kwargs.items():
        try:
            factory(**{key: value})
        except DomainError:
            return key
    return ""


def _build(values: dict[str, dict[str, Any]], lines: dict[tuple[str, str], int], path: str | None) -> ExperimentConfig:
    sections: dict[str, Any] = {}
    explicit_ppo_lr = "lr" in values.get("ppo", {})
    for name, cls in SECTIONS.items():
        given = values.get(name, {})
        defaults = {f.name: f.default for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, raw in given.items():
            if key not in defaults:
                raise ConfigError(f"unknown key {key!r} in section [{name}]", path, lines.get((name, key)))
            try:
                kwargs[key] = _convert(raw, defaults[key])
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"[{name}] {key}: {exc}", path, lines.get((name, key))) from None
        try:
            sections[name] = cls(**kwargs)
        except DomainError as exc:
            key = _blame(cls, kwargs)
            raise ConfigError(f"[{name}] {exc}", path, lines.get((name, key), lines.get((name, "")))) from None
    cfg = ExperimentConfig(**sections, source=path)
    _validate(cfg, lines, path)
    if cfg.mode == "two-stage" and not explicit_ppo_lr:
        cfg.ppo.lr = TWO_STAGE_LR
    return cfg


def _validate(cfg: ExperimentConfig, lines: dict[tuple[str, str], int], path: str | None) -> None:
    exp = cfg.experiment

    def fail(key: str, message: str, section: str = "experiment"):
        raise ConfigError(message, path, lines.get((section, key)))

    if exp.mode not in BENCH_MODES:
        fail("mode", f"mode must be one of {', '.join(BENCH_MODES)}; got {exp.mode!r}")
    if exp.repetitions < 1:
        fail("repetitions", "repetitions must be >= 1")
    if exp.eval_episodes < 1:
        fail("eval_episodes", "eval_episodes must be >= 1")
    corpus = cfg.corpus_path
    if corpus is not None:
        if path is not None and not corpus.is_absolute():
            corpus = Path(path).parent / corpus
            exp.eval_targets = str(corpus)
        if not corpus.is_file():
            fail("eval_targets", f"eval_targets corpus {str(corpus)!r} does not exist")
    elif cfg.eval_target_count < 1:
        fail("eval_targets", "eval_targets must be a positive count or a corpus path")
    try:
        cfg.env_config()
    except DomainError as exc:
        given = {k: v for k, v in dataclasses.asdict(cfg.env).items() if v != getattr(EnvSection, k)}
        key = _blame(lambda **kw: EnvConfig(**{"n": 2, "lam": 1, **kw}), given)
        raise ConfigError(f"[env] {exc}", path, lines.get(("env", key), lines.get(("env", "")))) from None
    for key in ("lambda_list", "n_list"):
        try:
            getattr(cfg, key)
        except ConfigError as exc:
            raise ConfigError(str(exc), path, lines.get(("landscape", key))) from None


def parse_config(text: str, path: str | None = None) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text, source=path or "<config>")
    except configparser.MissingSectionHeaderError as exc:
        raise ConfigError("expected a [section] header first", path, exc.lineno) from None
    except configparser.ParsingError as exc:
        line, content = exc.errors[0]
        raise ConfigError(f"cannot parse line {content}", path, line) from None
    except configparser.DuplicateOptionError as exc:
        raise ConfigError(f"duplicate key {exc.option!r} in [{exc.section}]", path, exc.lineno) from None
    except configparser.DuplicateSectionError as exc:
        raise ConfigError(f"duplicate section [{exc.section}]", path, exc.lineno) from None
    lines = _key_lines(text)
    values: dict[str, dict[str, Any]] = {}
    for section in parser.sections():
        name = section.strip().lower()
        if name not in SECTIONS:
            raise ConfigError(f"unknown section [{section}]", path, lines.get((name, "")))
        values[name] = dict(parser.items(section))
    return _build(values, lines, path)


def config_from_dict(data: dict[str, dict[str, Any]], path: str | None = None) -> ExperimentConfig:
    for name in data:
        if name not in SECTIONS:
            raise ConfigError(f"unknown section {name!r}", path)
    return _build({name: dict(section) for name, section in data.items()}, {}, path)


def load_config(path: str | Path | None) -> ExperimentConfig:
    """Read an INI-style config, or the resolved config inside a run manifest."""
    if path is None:
        return _build({}, {}, None)
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", str(p)) from None
    if text.lstrip().startswith("{"):
        try:
            manifest = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid JSON: {exc.msg}", str(p), exc.lineno) from None
        if "config" not in manifest:
            raise ConfigError("manifest has no 'config' entry", str(p))
        return config_from_dict(manifest["config"], str(p))
    return parse_config(text, str(p))
