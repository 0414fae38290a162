"""Sectioned key=value experiment configuration.

Sections: [run], [family], [meta_train], [meta_test], [separation], [validate].
Lists are whitespace separated; booleans are true/false.
"""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

from .envs import (TaskFamily, binary_tree_family, exit_separation, four_room_benchmark,
                   four_room_target, make_counterexample_env)
from .metatrain import MetaTrainConfig
from .metatest import MetaTestConfig
from .textio import hierarchy_from_text, load_mdp

FAMILY_KINDS = ("four-room-benchmark", "four-room-target", "binary-tree", "counterexample", "files")


class ConfigError(ValueError):
    pass


@dataclass
class SeparationSettings:
    widths: tuple[int, ...] = (4, 6, 8)
    num_episodes: int = 2000
    eps: float = 0.1
    bonus_scale: float = 0.01


@dataclass
class ValidateSettings:
    rho: float | None = None
    delta: float | None = None
    alpha: float | None = None
    zeta: float | None = None
    subset_size_cap: int = 2
    index_samples: int = 8


@dataclass
class OracleSettings:
    source: str = "ground-truth"     # or "learned"
    state: Path | None = None        # meta-train state directory for a learned oracle
    task: int = 0                    # family task used as the downstream target
    eps0: float | None = None


@dataclass
class ExperimentConfig:
    path: Path | None
    text: str
    root_seed: int = 0
    seeds: tuple = (0,)
    out: Path = Path("runs")
    plot: bool = False
    family: dict = field(default_factory=dict)
    meta_train: MetaTrainConfig = field(default_factory=MetaTrainConfig)
    meta_test: MetaTestConfig | None = None
    oracle: OracleSettings = field(default_factory=OracleSettings)
    separation: SeparationSettings = field(default_factory=SeparationSettings)
    validate: ValidateSettings = field(default_factory=ValidateSettings)

    @property
    def digest(self) -> str:
        """Hash of the config text and root seed."""
        return hashlib.sha256(f"{self.root_seed}\n{self.text}".encode()).hexdigest()[:16]

    def build_family(self):
        return build_family(self.family, self.path.parent if self.path else Path("."))


def _convert(raw: str, kind):
    """Parse ``raw`` into the type named by a dataclass annotation string."""
    kind = str(kind)
    if raw.strip().lower() in ("none", ""):
        return None
    if kind.startswith("tuple"):
        inner = int if "int" in kind else float
        return tuple(inner(x) for x in raw.split())
    if kind.startswith("bool"):
        return _bool(raw)
    if kind.startswith("int"):
        return int(raw)
    if kind.startswith("float"):
        return float(raw)
    return raw


def _bool(raw: str) -> bool:
    v = raw.strip().lower()
    if v in ("true", "yes", "1", "on"):
        return True
    if v in ("false", "no", "0", "off"):
        return False
    raise ConfigError(f"not a boolean: {raw!r}")


def _fill(cls, section, name: str, **extra):
    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = dict(extra)
    for key, raw in section.items():
        if key not in known:
            raise ConfigError(f"[{name}] unknown key {key!r}")
        try:
            kwargs[key] = _convert(raw, known[key].type)
        except ValueError as exc:
            raise ConfigError(f"[{name}] {key}: {exc}") from None
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{name}] {exc}") from None


def parse_config(text: str, path: Path | None = None) -> ExperimentConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config parse error: {exc}") from None
    unknown = set(cp.sections()) - {"run", "family", "meta_train", "meta_test", "separation",
                                    "validate"}
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(sorted(unknown))}")
    cfg = ExperimentConfig(path, text)
    base = path.parent if path else Path(".")
    if cp.has_section("run"):
        run = cp["run"]
        extra = set(run) - {"root_seed", "seeds", "out", "plot"}
        if extra:
            raise ConfigError(f"[run] unknown key(s): {', '.join(sorted(extra))}")
        try:
            cfg.root_seed = int(run.get("root_seed", "0"))
            cfg.seeds = tuple(int(x) for x in run.get("seeds", "0").split())
        except ValueError as exc:
            raise ConfigError(f"[run] {exc}") from None
        cfg.out = base / run.get("out", "runs")
        cfg.plot = _bool(run.get("plot", "false"))
    if not cfg.seeds:
        raise ConfigError("[run] seeds must be nonempty")
    if cp.has_section("family"):
        cfg.family = dict(cp["family"])
        kind = cfg.family.get("kind")
        if kind not in FAMILY_KINDS:
            raise ConfigError(f"[family] kind must be one of {', '.join(FAMILY_KINDS)}, got {kind!r}")
        if kind == "files":
            for key in ("tasks", "hierarchy"):
                if key not in cfg.family:
                    raise ConfigError(f"[family] files kind needs {key!r}")
            for name in cfg.family["tasks"].split() + [cfg.family["hierarchy"]]:
                if not (base / name).exists():
                    raise ConfigError(f"[family] referenced file {name!r} does not exist")
    if cp.has_section("meta_train"):
        cfg.meta_train = _fill(MetaTrainConfig, cp["meta_train"], "meta_train")
    if cp.has_section("meta_test"):
        sec = dict(cp["meta_test"])
        oracle = {k: sec.pop(k) for k in ("oracle", "state", "task", "eps0") if k in sec}
        cfg.meta_test = _fill(MetaTestConfig, sec, "meta_test")
        o = cfg.oracle
        o.source = oracle.get("oracle", "ground-truth")
        if o.source not in ("ground-truth", "learned"):
            raise ConfigError("[meta_test] oracle must be ground-truth or learned")
        o.state = base / oracle["state"] if "state" in oracle else None
        o.task = int(oracle.get("task", "0"))
        o.eps0 = _convert(oracle.get("eps0", "none"), "float")
    if cp.has_section("separation"):
        cfg.separation = _fill(SeparationSettings, cp["separation"], "separation")
    if cp.has_section("validate"):
        cfg.validate = _fill(ValidateSettings, cp["validate"], "validate")
    return cfg


def load_config(path) -> ExperimentConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {p} does not exist")
    return parse_config(p.read_text(), p)


def build_family(spec: dict, base: Path):
    kind = spec.get("kind")
    get = spec.get
    try:
        if kind == "four-room-benchmark":
            return four_room_benchmark(int(get("horizon", 30)), float(get("slip", 0.0)))
        if kind == "four-room-target":
            goal = tuple(int(x) for x in get("goal").split()) if get("goal") else None
            mdp, hier, room = four_room_target(int(get("side", 7)), int(get("horizon", 60)), goal,
                                               float(get("slip", 0.0)))
            return TaskFamily([mdp], hier, exit_separation([mdp], hier.exits),
                              {"kind": kind, "target": room})
        if kind == "binary-tree":
            return binary_tree_family(int(get("W", 4)), get("leaf", "0" * (int(get("W", 4)) - 1)),
                                      int(get("leaf_action", 0)), float(get("eps", 0.1)),
                                      int(get("horizon")) if get("horizon") else None)
        if kind == "counterexample":
            mdp, hier = make_counterexample_env(get("variant", "chain"), int(get("H", 16)))
            return TaskFamily([mdp], hier, exit_separation([mdp], hier.exits), {"kind": kind})
        if kind == "files":
            tasks = [load_mdp(base / name) for name in spec["tasks"].split()]
            hier = hierarchy_from_text((base / spec["hierarchy"]).read_text())
            return TaskFamily(tasks, hier, exit_separation(tasks, hier.exits), {"kind": "files"})
    except (TypeError, KeyError, ValueError) as exc:
        raise ConfigError(f"[family] {exc}") from None
    raise ConfigError(f"[family] unknown kind {kind!r}")
