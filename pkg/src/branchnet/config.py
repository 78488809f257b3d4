"""Flat key=value configuration files.

One assignment per line, `#` starts a comment, blank lines ignored. Keys
are namespaced by prefix (arch.*, train.*) and consumed by the matching
from_mapping constructors; values stay strings until a consumer types them.
"""


def parse_config_text(text: str, source="<config>") -> dict:
    mapping = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep or not key.strip():
            raise ValueError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        if key.strip() in mapping:
            raise ValueError(f"{source}:{lineno}: duplicate key {key.strip()!r}")
        mapping[key.strip()] = value.strip()
    return mapping


def load_config(path) -> dict:
    with open(path) as f:
        return parse_config_text(f.read(), source=str(path))


def parse_assignments(items) -> dict:
    """key=value override flags, later ones winning."""
    mapping = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ValueError(f"override must look like key=value, got {item!r}")
        mapping[key] = value
    return mapping


def merged(*mappings) -> dict:
    out = {}
    for m in mappings:
        out.update(m)
    return out
