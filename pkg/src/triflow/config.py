"""Flat key=value run configuration files.

One "key = value" pair per line; blank lines and #-comments ignored. Values
are typed by shape: true/false -> bool, digits -> int, numeric -> float,
anything else -> string. Dotted keys (model.d_model, data.n_t2i) namespace
nested configs. save_config writes keys sorted so archived configs diff
cleanly.
"""

from triflow.errors import ConfigError


def parse_value(raw: str):
    """Coerce a raw string to bool, int, float, or leave it a string."""
    text = raw.strip()
    if text.lower() == "true":
        return True
    if text.lower() == "false":
        return False
    try:
        return int(text)
    except ValueError:
        pass
    try:
        return float(text)
    except ValueError:
        return text


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_config(text: str) -> dict:
    """Parse key=value lines into a flat dict; duplicate keys rejected."""
    flat = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {lineno}: expected key = value, got {line!r}")
        key, _, raw = body.partition("=")
        key = key.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key in {line!r}")
        if key in flat:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        flat[key] = parse_value(raw)
    return flat


def load_config(path) -> dict:
    with open(str(path), encoding="utf-8") as fh:
        return parse_config(fh.read())


def save_config(path, flat: dict) -> None:
    lines = [f"{key} = {format_value(flat[key])}" for key in sorted(flat)]
    with open(str(path), "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
