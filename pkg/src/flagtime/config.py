"""Flat ``key = value`` run configuration.

Keys without a prefix (and ``noise.*``, ``base_latency.*``) configure the
micro-architecture. ``attack.*`` and ``victim.*`` configure the attacker and the
co-running victim. Blank lines and ``#`` comments are ignored; unknown keys are
errors. Example::

    revert_stall_window = 8
    noise.outlier_magnitude = 5000
    attack.passes = 2000
    victim.secret = SECRET
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Mapping, Union

from .attack import AttackConfig, VictimSpec, attack_mapping, victim_mapping
from .core import ConfigError, MicroConfig

DEFAULT_SECRET = b"SECRET"

_BOOL = {"1": True, "true": True, "yes": True, "0": False, "false": False, "no": False}


@dataclass(frozen=True)
class RunConfig:
    micro: MicroConfig = field(default_factory=MicroConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    victim: VictimSpec = field(default_factory=lambda: VictimSpec(DEFAULT_SECRET))

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, micro=replace(self.micro, rng_seed=seed))

    def to_mapping(self) -> Dict[str, object]:
        out: Dict[str, object] = dict(self.micro.to_mapping())
        out.update({f"attack.{k}": v for k, v in attack_mapping(self.attack).items()})
        out.update({f"victim.{k}": v for k, v in victim_mapping(self.victim).items()})
        return out

    def to_text(self) -> str:
        return "".join(f"{k} = {_render(v)}\n" for k, v in self.to_mapping().items())


def _render(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def parse_pairs(text: str) -> Dict[str, str]:
    pairs: Dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if not sep or not key:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        if key in pairs:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        pairs[key] = value
    return pairs


def _attack(values: Mapping[str, str]) -> AttackConfig:
    kwargs: Dict[str, object] = {}
    for key, raw in values.items():
        if key in ("to", "passes"):
            kwargs[key] = int(raw, 0)
        elif key == "offset_range":
            if raw.lower() != "all":
                kwargs[key] = tuple(int(o, 0) for o in raw.split(",") if o.strip())
        elif key == "decode_rule":
            kwargs[key] = raw
        else:
            raise ConfigError(f"unknown config key 'attack.{key}'")
    return AttackConfig(**kwargs)


def _victim(values: Mapping[str, str]) -> VictimSpec:
    kwargs: Dict[str, object] = {"secret": DEFAULT_SECRET}
    if "secret" in values and "secret_hex" in values:
        raise ConfigError("give victim.secret or victim.secret_hex, not both")
    for key, raw in values.items():
        if key == "secret":
            kwargs[key] = raw.encode()
        elif key == "secret_hex":
            kwargs["secret"] = bytes.fromhex(raw)
        elif key == "keep_cached":
            if raw.lower() not in _BOOL:
                raise ConfigError(f"bad boolean for victim.keep_cached: {raw!r}")
            kwargs[key] = _BOOL[raw.lower()]
        elif key == "uncached_readability":
            kwargs[key] = float(raw)
        elif key == "secret_addr":
            kwargs[key] = int(raw, 0)
        else:
            raise ConfigError(f"unknown config key 'victim.{key}'")
    return VictimSpec(**kwargs)


def parse_config(text: str) -> RunConfig:
    pairs = parse_pairs(text)
    groups: Dict[str, Dict[str, str]] = {"micro": {}, "attack": {}, "victim": {}}
    for key, value in pairs.items():
        prefix, dot, rest = key.partition(".")
        if dot and prefix in ("attack", "victim"):
            groups[prefix][rest] = value
        else:
            groups["micro"][key] = value
    try:
        return RunConfig(MicroConfig.from_mapping(groups["micro"]), _attack(groups["attack"]),
                         _victim(groups["victim"]))
    except ConfigError:
        raise
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: Union[str, Path]) -> RunConfig:
    return parse_config(Path(path).read_text())
