"""Flat key=value run configuration with file < env < flag precedence.

Every CLI run resolves its configuration through here and writes the
resolved key=value set plus its hash next to the run outputs, so any
artifact can be traced back to the exact configuration that produced it.
"""

from __future__ import annotations

import hashlib
import os
from pathlib import Path

from .errors import ConfigurationError

ENV_PREFIX = "GENVIT_"


def parse_kv_file(path) -> dict[str, str]:
    out = {}
    with open(path, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, 1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigurationError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def _coerce(key: str, raw: str, kind):
    try:
        if kind is bool:
            low = str(raw).lower()
            if low not in ("0", "1", "true", "false"):
                raise ValueError(raw)
            return low in ("1", "true")
        return kind(raw)
    except ValueError as err:
        raise ConfigurationError(f"config key {key}: cannot parse {raw!r} as {kind.__name__}") from err


def resolve_config(
    schema: dict[str, tuple],
    config_file: str | None,
    flag_values: dict,
    all_known_keys: set[str] | None = None,
    environ: dict | None = None,
) -> dict:
    """Merge defaults < file < environment < flags under the schema.

    schema: key -> (type, default). Unknown file keys are rejected; GENVIT_*
    environment keys must at least belong to some subcommand's schema.
    """
    environ = os.environ if environ is None else environ
    resolved = {k: default for k, (_, default) in schema.items()}

    if config_file:
        for key, raw in parse_kv_file(config_file).items():
            if key not in schema:
                raise ConfigurationError(f"unknown config key {key!r} in {config_file}")
            resolved[key] = _coerce(key, raw, schema[key][0])

    for env_key, raw in sorted(environ.items()):
        if not env_key.startswith(ENV_PREFIX):
            continue
        key = env_key[len(ENV_PREFIX) :].lower()
        if key in schema:
            resolved[key] = _coerce(key, raw, schema[key][0])
        elif all_known_keys is not None and key not in all_known_keys:
            raise ConfigurationError(f"unknown environment key {env_key}")

    for key, value in flag_values.items():
        if value is None:
            continue
        if key not in schema:
            raise ConfigurationError(f"unknown flag key {key!r}")
        resolved[key] = _coerce(key, str(value), schema[key][0])
    return resolved


def config_hash(resolved: dict) -> str:
    lines = [f"{k}={resolved[k]}" for k in sorted(resolved)]
    return hashlib.sha256("\n".join(lines).encode()).hexdigest()[:16]


def write_resolved(resolved: dict, out_path) -> str:
    """Write the resolved config next to the run outputs; returns the hash.

    For a directory output this is <out>/resolved.cfg, for a file output
    <out>.resolved.cfg.
    """
    digest = config_hash(resolved)
    out_path = Path(out_path)
    if out_path.suffix and not out_path.is_dir():
        target = out_path.with_name(out_path.name + ".resolved.cfg")
        out_path.parent.mkdir(parents=True, exist_ok=True)
    else:
        out_path.mkdir(parents=True, exist_ok=True)
        target = out_path / "resolved.cfg"
    lines = [f"{k}={resolved[k]}" for k in sorted(resolved)]
    lines.append(f"config_hash={digest}")
    target.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return digest
