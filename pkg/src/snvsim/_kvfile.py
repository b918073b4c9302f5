"""Reader/writer for the bracketed key-value text format shared by emitter,
sequence and target files.

A file is a list of blocks::

    # comment
    [sequence]
    repetitions = 100

    [segment]
    duration_ms = 2.0

Block names may repeat. Values are raw strings; typed conversion and schema
checks belong to the caller, which gets line numbers for error messages.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

import numpy as np

_HEADER = re.compile(r"^\[\s*([A-Za-z_][A-Za-z0-9_]*)\s*\]$")
_KEY = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")


class ConfigError(ValueError):
    """Invalid input file or configuration value."""


class KVSyntaxError(ConfigError):
    def __init__(self, message, line, column=1):
        self.line = line
        self.column = column
        super().__init__(f"line {line}, column {column}: {message}")


@dataclass
class Entry:
    value: str
    line: int


@dataclass
class Block:
    name: str
    line: int
    entries: dict[str, Entry] = field(default_factory=dict)

    def error(self, key, message):
        line = self.entries[key].line if key in self.entries else self.line
        return ConfigError(f"line {line}: [{self.name}] {key}: {message}")

    def check_keys(self, allowed):
        for key, entry in self.entries.items():
            if key not in allowed:
                raise ConfigError(f"line {entry.line}: [{self.name}] unknown key '{key}'")

    def get_str(self, key, default=None):
        if key not in self.entries:
            if default is None:
                raise self.error(key, "missing required key")
            return default
        return self.entries[key].value

    def get_float(self, key, default=None, *, minimum=None, positive=False):
        if key not in self.entries:
            if default is None:
                raise self.error(key, "missing required key")
            return default
        raw = self.entries[key].value
        try:
            value = float(raw)
        except ValueError:
            raise self.error(key, f"expected a number, got '{raw}'") from None
        if not math.isfinite(value):
            raise self.error(key, "value must be finite")
        if positive and value <= 0:
            raise self.error(key, f"must be > 0, got {raw}")
        if minimum is not None and value < minimum:
            raise self.error(key, f"must be >= {minimum}, got {raw}")
        return value

    def get_floats(self, key):
        raw = self.get_str(key)
        try:
            return [float(part) for part in raw.split(",") if part.strip()]
        except ValueError:
            raise self.error(key, f"expected comma-separated numbers, got '{raw}'") from None

    def get_int(self, key, default=None, *, minimum=None):
        if key not in self.entries:
            if default is None:
                raise self.error(key, "missing required key")
            return default
        raw = self.entries[key].value
        try:
            value = int(raw)
        except ValueError:
            raise self.error(key, f"expected an integer, got '{raw}'") from None
        if minimum is not None and value < minimum:
            raise self.error(key, f"must be >= {minimum}, got {raw}")
        return value

    def get_bool(self, key, default=None):
        if key not in self.entries:
            if default is None:
                raise self.error(key, "missing required key")
            return default
        raw = self.entries[key].value.lower()
        if raw in ("true", "yes", "1", "on"):
            return True
        if raw in ("false", "no", "0", "off"):
            return False
        raise self.error(key, f"expected true/false, got '{raw}'")


def parse_blocks(text):
    blocks = []
    current = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        stripped = raw.strip()
        if not stripped or stripped.startswith("#"):
            continue
        indent = len(raw) - len(raw.lstrip())
        if stripped.startswith("["):
            match = _HEADER.match(stripped)
            if match is None:
                raise KVSyntaxError("malformed block header", lineno, indent + 1)
            current = Block(match.group(1), lineno)
            blocks.append(current)
            continue
        if "=" not in stripped:
            raise KVSyntaxError("expected 'key = value'", lineno, indent + 1)
        key, _, value = stripped.partition("=")
        key = key.strip()
        if not _KEY.match(key):
            raise KVSyntaxError(f"invalid key '{key}'", lineno, indent + 1)
        if current is None:
            raise KVSyntaxError("key outside of a [block]", lineno, indent + 1)
        if key in current.entries:
            raise KVSyntaxError(f"duplicate key '{key}'", lineno, indent + 1)
        value = value.split(" #", 1)[0].strip()
        if not value:
            col = indent + raw.strip().index("=") + 2
            raise KVSyntaxError(f"empty value for '{key}'", lineno, col)
        current.entries[key] = Entry(value, lineno)
    return blocks


def format_number(si_value, unit):
    """Shortest decimal text ``t`` with ``float(t) * unit == si_value``.

    ``unit`` is the SI size of one file unit (``1e-9`` for nW). Values
    written as ``n * unit`` in code and values read from files both come
    back bit-identical.
    """
    if si_value == 0:
        return "0"
    guess = si_value / unit
    candidates = [guess]
    up = down = guess
    for _ in range(4):
        up = np.nextafter(up, math.inf)
        down = np.nextafter(down, -math.inf)
        candidates += [float(up), float(down)]
    exact = []
    for cand in candidates:
        for digits in range(1, 18):
            text = repr(float(f"{cand:.{digits}g}"))
            if float(text) * unit == si_value:
                exact.append(text)
                break
    if exact:
        return _trim(min(exact, key=len))
    return _trim(repr(float(guess)))


def to_si(text_value, unit):
    return float(text_value) * unit


def _trim(text):
    return text[:-2] if text.endswith(".0") else text


def dump_blocks(blocks, header_comments=()):
    """``blocks`` is a list of ``(name, [(key, text), ...])``."""
    lines = [f"# {c}" if c else "#" for c in header_comments]
    for name, items in blocks:
        if lines:
            lines.append("")
        lines.append(f"[{name}]")
        lines.extend(f"{key} = {value}" for key, value in items)
    return "\n".join(lines) + "\n"
