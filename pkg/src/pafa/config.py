"""
Flat key=value configuration files and environment overrides.

Format (one setting per line):

    # comment
    epochs=30
    lambda_pcsl=50

Keys are written sorted so that identical settings give identical bytes.
"""

import os
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Union

from .errors import ManifestIOError, ParseError

CACHE_ENV_VAR = "PAFA_CACHE_DIR"
DEFAULT_CACHE_DIRNAME = ".pafa_cache"


def _format_value(value: Any) -> str:
    """Render one config value on a single line."""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return ",".join(_format_value(v) for v in value)
    text = str(value)
    if "\n" in text:
        raise ValueError(f"Config values must be single-line: {text!r}")
    return text


def parse_flat_config(text: str, source: str = "<string>") -> Dict[str, str]:
    """Parse key=value text into a dict of raw strings."""
    values: Dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ParseError(f"{source}: expected key=value, got {line!r}", line=lineno)
        key, value = line.split("=", 1)
        key = key.strip()
        if not key:
            raise ParseError(f"{source}: empty key", line=lineno)
        values[key] = value.strip()
    return values


def load_flat_config(path: Union[str, Path]) -> Dict[str, str]:
    """Load a key=value file."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ManifestIOError(f"Cannot read config {path}: {e}") from e
    return parse_flat_config(text, source=str(path))


def dump_flat_config(values: Mapping[str, Any]) -> str:
    """Render a mapping as sorted key=value lines."""
    lines = [f"{key}={_format_value(values[key])}" for key in sorted(values)]
    return "\n".join(lines) + "\n"


def save_flat_config(path: Union[str, Path], values: Mapping[str, Any]) -> None:
    """Write a mapping as a key=value file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dump_flat_config(values), encoding="utf-8")


def parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"Not a boolean: {text!r}")


def parse_float_list(text: str) -> tuple:
    return tuple(float(v) for v in text.split(",") if v.strip())


def parse_int_list(text: str) -> tuple:
    return tuple(int(v) for v in text.split(",") if v.strip())


def resolve_cache_dir(explicit: Optional[Union[str, Path]] = None,
                      workdir: Optional[Union[str, Path]] = None) -> Path:
    """
    Pick the feature-cache directory.

    Priority: explicit argument, then $PAFA_CACHE_DIR, then
    <workdir>/.pafa_cache (workdir defaults to the current directory).
    """
    if explicit:
        return Path(explicit).expanduser().resolve()
    env = os.environ.get(CACHE_ENV_VAR)
    if env:
        return Path(env).expanduser().resolve()
    base = Path(workdir) if workdir else Path.cwd()
    return (base / DEFAULT_CACHE_DIRNAME).resolve()
