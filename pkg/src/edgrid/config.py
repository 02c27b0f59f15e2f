"""Key=value configuration files (`.config`) and tier configuration objects."""

from __future__ import annotations

from typing import Dict, Optional


class BadExtension(ValueError):
    """Configuration files must end in .config."""


class ParseError(ValueError):
    def __init__(self, line_no: int, message: str):
        super().__init__("line %d: %s" % (line_no, message))
        self.line_no = line_no


class Configuration:
    """String settings for a tier or daemon; cloning shares no mutable state."""

    def __init__(self, settings: Optional[Dict[str, str]] = None):
        self._settings: Dict[str, str] = {}
        for key, value in (settings or {}).items():
            self.set(key, value)

    def set(self, key: str, value: str):
        if not key:
            raise ValueError("configuration keys must be non-empty")
        self._settings[str(key)] = str(value)

    def get(self, key: str, default: Optional[str] = None) -> Optional[str]:
        return self._settings.get(key, default)

    def get_int(self, key: str, default: int) -> int:
        raw = self._settings.get(key)
        return default if raw is None else int(raw)

    def get_float(self, key: str, default: float) -> float:
        raw = self._settings.get(key)
        return default if raw is None else float(raw)

    def as_dict(self) -> Dict[str, str]:
        return dict(self._settings)

    def clone(self) -> "Configuration":
        return Configuration(dict(self._settings))

    def merged(self, overrides: "Configuration") -> "Configuration":
        merged = self.clone()
        for key, value in overrides.as_dict().items():
            merged.set(key, value)
        return merged

    def __eq__(self, other):
        return isinstance(other, Configuration) and self._settings == other._settings

    def __repr__(self):
        return "Configuration(%r)" % (self._settings,)


def load_config(path: str) -> Configuration:
    """Parse a .config file: key=value lines, '#' comments, last duplicate wins."""
    if not path.endswith(".config"):
        raise BadExtension("expected a .config file, got %r" % path)
    config = Configuration()
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            uncommented = _remove_comment(line)
            if not uncommented:
                continue
            if "=" not in uncommented:
                raise ParseError(line_no, "expected key=value, got %r" % line)
            key, _, value = uncommented.partition("=")
            key = key.strip()
            value = value.strip()
            if not key:
                raise ParseError(line_no, "empty key")
            config.set(key, value)
    return config


def _remove_comment(line: str) -> str:
    index = line.find("#")
    if index >= 0:
        line = line[:index]
    return line.strip()

