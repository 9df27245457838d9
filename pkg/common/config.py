from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Mapping

from dotenv import dotenv_values, load_dotenv

from common.errors import ConfigError

# Pick up variables from a local .env
load_dotenv()

IMAGE_FORMATS = ("png", "ppm")


def _get_env_optional(name: str, default: str | None = None) -> str | None:
    v = os.getenv(name, default)
    if v is None:
        return None
    v = v.strip()
    return v if v != "" else None


def _get_int(name: str, default: int) -> int:
    v = _get_env_optional(name)
    if v is None:
        return default
    try:
        return int(v)
    except ValueError as e:
        raise ConfigError(f"Env var {name} must be int, got: {v}") from e


def _get_choice(name: str, default: str, choices: tuple[str, ...]) -> str:
    v = (_get_env_optional(name) or default).lower()
    if v not in choices:
        raise ConfigError(f"Env var {name} must be one of {list(choices)}, got: {v}")
    return v


@dataclass(frozen=True)
class Settings:
    out_root: Path
    image_format: str = "png"
    torch_threads: int = 0  # 0 = leave torch's default


def load_settings() -> Settings:
    return Settings(
        out_root=Path(_get_env_optional("TRYON_OUT_ROOT") or "runs").expanduser(),
        image_format=_get_choice("TRYON_IMAGE_FORMAT", "png", IMAGE_FORMATS),
        torch_threads=_get_int("TRYON_TORCH_THREADS", 0),
    )


def read_config_file(path: str | Path | None) -> dict[str, str]:
    """
    Optional per-command config file in dotenv format (KEY=value, keys are upper-snake flag names).
    Missing file is an error; empty values are dropped.
    """
    if path is None:
        return {}
    p = Path(path).expanduser()
    if not p.exists():
        raise ConfigError(f"Config file not found: {p}")
    raw = dotenv_values(p)
    return {k.strip().upper(): v.strip() for k, v in raw.items() if v is not None and v.strip() != ""}


def resolve(
    defaults: Mapping[str, Any],
    file_values: Mapping[str, str],
    flags: Mapping[str, Any],
) -> dict[str, Any]:
    """
    flags > config file > built-in defaults.
    Flags left at None count as "not given". File values are coerced to the default's type.
    """
    out: dict[str, Any] = {}
    for key, default in defaults.items():
        flag = flags.get(key)
        if flag is not None:
            out[key] = flag
            continue

        file_key = key.upper()
        if file_key in file_values:
            out[key] = _coerce(file_key, file_values[file_key], default)
            continue

        out[key] = default
    return out


def _coerce(name: str, raw: str, default: Any) -> Any:
    if default is None or isinstance(default, str):
        return raw
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low not in ("true", "1", "yes", "y", "false", "0", "no", "n"):
                raise ValueError(raw)
            return low in ("true", "1", "yes", "y")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError as e:
        raise ConfigError(f"Config key {name} must be {type(default).__name__}, got: {raw}") from e
    return raw
