"""Run configuration: ``key = value`` files plus ``--key value`` overrides."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Mapping, Sequence

__all__ = [
    "RunConfig",
    "ConfigError",
    "UnknownKeyError",
    "ValueParseError",
    "ConstraintError",
    "parse_config",
    "parse_overrides",
]


class ConfigError(ValueError):
    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


class UnknownKeyError(ConfigError):
    pass


class ValueParseError(ConfigError):
    pass


class ConstraintError(ConfigError):
    pass


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    epochs: int = 50
    lr: float = 1e-3
    batch_size: int = 8
    T: int = 5
    gamma: float = 0.1
    top_k: int = 30
    lambda1: float = 1.0
    lambda2: float = 1.0
    shots: int = 1
    n_train: int = 200
    n_test: int = 50
    c_prime: int = 16
    c_enc: int = 16
    c_cls: int = 32
    feat_size: int = 16
    image_size: int = 64
    graph_enabled: bool = True
    kernel_enabled: bool = True

    def __post_init__(self):
        for key in ("batch_size", "top_k", "n_train", "n_test", "c_prime", "c_enc", "c_cls", "feat_size", "image_size"):
            if getattr(self, key) < 1:
                raise ConstraintError(key, "must be >= 1")
        for key in ("epochs", "T"):
            if getattr(self, key) < 0:
                raise ConstraintError(key, "must be >= 0")
        if not 0 <= self.seed < 2**64:
            raise ConstraintError("seed", "must be an unsigned 64-bit integer")
        if not self.lr > 0:
            raise ConstraintError("lr", "must be > 0")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConstraintError("gamma", "must lie in [0, 1]")
        for key in ("lambda1", "lambda2"):
            if getattr(self, key) < 0:
                raise ConstraintError(key, "must be >= 0")
        if self.shots not in (1, 2, 4):
            raise ConstraintError("shots", "must be 1, 2 or 4")
        if self.shots > self.n_train:
            raise ConstraintError("shots", "cannot exceed n_train")
        if self.c_prime % 2:
            raise ConstraintError("c_prime", "must be even")
        if self.image_size != 4 * self.feat_size:
            raise ConstraintError("image_size", "must equal 4 * feat_size")

    @property
    def iterations(self) -> int:
        """Message-passing rounds actually run (0 when the graph is disabled)."""
        return self.T if self.graph_enabled else 0

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}
_TRUE = {"true", "1", "yes", "on"}
_FALSE = {"false", "0", "no", "off"}


def _convert(key: str, raw) -> object:
    if key not in _FIELDS:
        raise UnknownKeyError(key, "unknown configuration key")
    kind = _FIELDS[key].type
    if not isinstance(raw, str):
        raw = str(raw)
    text = raw.strip()
    try:
        if kind in (bool, "bool"):
            low = text.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError
        if kind in (int, "int"):
            return int(text, 0)
        if kind in (float, "float"):
            return float(text)
    except ValueError:
        raise ValueParseError(key, f"cannot parse {raw!r} as {kind}") from None
    raise ValueParseError(key, f"unsupported field type {kind}")


def parse_overrides(args: Sequence[str]) -> dict[str, str]:
    """``['--T', '3', '--gamma=0.2'] -> {'T': '3', 'gamma': '0.2'}``."""
    out: dict[str, str] = {}
    it = iter(args)
    for tok in it:
        if not tok.startswith("--"):
            raise ValueParseError(tok, "expected a --key flag")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            try:
                value = next(it)
            except StopIteration:
                raise ValueParseError(key, "missing value") from None
        out[key.replace("-", "_")] = value
    return out


def parse_config(
    path: str | None = None,
    overrides: Mapping[str, object] | Sequence[str] | None = None,
    base: RunConfig | None = None,
) -> RunConfig:
    """Build a validated :class:`RunConfig`; override values win over file
    values, which win over ``base`` (the defaults when omitted)."""
    values: dict[str, object] = base.to_dict() if base is not None else {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ValueParseError(f"line {lineno}", f"expected 'key = value', got {line!r}")
                key, raw = (part.strip() for part in line.split("=", 1))
                values[key] = _convert(key, raw)
    if overrides:
        if not isinstance(overrides, Mapping):
            overrides = parse_overrides(list(overrides))
        for key, raw in overrides.items():
            values[key] = _convert(key, raw)
    return RunConfig(**values)
