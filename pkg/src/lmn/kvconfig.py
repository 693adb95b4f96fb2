"""Plain key=value config files: one pair per line, # comments, blank
lines ignored."""

from __future__ import annotations

from .errors import ContractError


def parse_kv(text: str, where: str = "config") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ContractError(f"{where}:{lineno}: expected key=value, got {raw!r}")
        key = key.strip()
        if key in out:
            raise ContractError(f"{where}:{lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out


def load_kv(path: str) -> dict[str, str]:
    with open(path, encoding="utf-8") as fh:
        return parse_kv(fh.read(), where=path)


def dump_kv(mapping: dict[str, str]) -> str:
    return "".join(f"{k}={v}\n" for k, v in mapping.items())
