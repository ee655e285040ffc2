"""Run configuration files and the manifest written at the head of every output.

Config files are flat ``key = value`` lines; ``#`` starts a comment line.

    n_ret = 100
    n_seg = 15
    collect_trace_nodes = false
"""

import os
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, Optional

import dacite
from dacite import from_dict
from dateutil import parser as datetimeparser

from fragsel import __version__
from fragsel.exceptions import ConfigError, FormatError
from fragsel.models import Config

TRUE_VALUES = frozenset({"true", "yes", "on", "1"})
FALSE_VALUES = frozenset({"false", "no", "off", "0"})


def _parse_bool(value) -> bool:
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in TRUE_VALUES:
        return True
    if text in FALSE_VALUES:
        return False
    raise ValueError(f"not a boolean: {value!r}")


def _parse_int(value) -> int:
    if isinstance(value, bool):
        raise ValueError(f"not an integer: {value!r}")
    if isinstance(value, int):
        return value
    return int(str(value).strip())


CONFIG_DACITE = dacite.Config(
    type_hooks={int: _parse_int, float: float, bool: _parse_bool},
    strict=True,
)


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, str]:
    entries = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: missing key")
        if key in entries:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        entries[key] = value
    return entries


def build_config(values: Dict[str, Any]) -> Config:
    try:
        return from_dict(Config, values, CONFIG_DACITE)
    except dacite.UnexpectedDataError as exc:
        raise ConfigError(f"unknown config keys: {sorted(exc.keys)}") from exc
    except (dacite.DaciteError, ValueError) as exc:
        raise ConfigError(f"invalid config value: {exc}") from exc


def load_config(path=None, overrides: Optional[Dict[str, Any]] = None) -> Config:
    """Defaults, then the file at ``path``, then ``overrides``."""
    values: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        try:
            text = path.read_text(encoding="utf-8")
        except FileNotFoundError as exc:
            raise ConfigError(f"config file {path} does not exist") from exc
        values.update(parse_config_text(text, source=str(path)))
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return build_config(values)


def manifest_timestamp() -> str:
    """Wall-clock UTC time, or SOURCE_DATE_EPOCH when set."""
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    if epoch:
        try:
            moment = datetime.fromtimestamp(int(epoch), tz=timezone.utc)
        except ValueError as exc:
            raise ConfigError(f"SOURCE_DATE_EPOCH is not an integer: {epoch!r}") from exc
    else:
        moment = datetime.now(timezone.utc)
    return moment.strftime("%Y-%m-%dT%H:%M:%SZ")


@dataclass
class RunManifest:
    command: str
    config: Dict[str, Any]
    backends: Dict[str, str]
    seed: int
    version: str = __version__
    created_at: str = field(default_factory=manifest_timestamp)

    @property
    def created(self) -> datetime:
        return datetimeparser.isoparse(self.created_at)

    def to_header(self) -> Dict[str, Any]:
        return {"manifest": asdict(self)}

    @classmethod
    def from_header(cls, row: Optional[Dict[str, Any]]) -> Optional["RunManifest"]:
        if row is None or "manifest" not in row:
            return None
        try:
            return from_dict(cls, row["manifest"], dacite.Config(check_types=False))
        except dacite.DaciteError as exc:
            raise FormatError(f"invalid run manifest: {exc}") from exc
