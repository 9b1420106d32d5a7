"""Flat key=value configuration files.

One ``key=value`` per line, ``#`` starts a comment, keys may be dotted
(``train.eta=0.001``). Section readers accept both ``train.eta`` and a bare
``eta`` so a file holding only training settings needs no prefixes.
"""

from __future__ import annotations

from pathlib import Path

from .exceptions import ConfigError

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}

TRAIN_KEYS = {
    "eta": ("eta", float),
    "beta1": ("beta1", float),
    "beta2": ("beta2", float),
    "eps": ("eps", float),
    "batch": ("batch_size", int),
    "batch_size": ("batch_size", int),
    "epochs": ("epochs", int),
    "drop_prob": ("drop_prob", float),
    "dropout": ("dropout", "bool"),
    "init": ("init_scheme", str),
    "init_scheme": ("init_scheme", str),
    "seed": ("seed", int),
    "precision": ("precision", str),
}

DATA_KEYS = {
    "seed": ("seed", int),
    "n_train": ("n_train", int),
    "n_test": ("n_test", int),
    "feature_dim": ("feature_dim", int),
    "sigma": ("noise_sigma", float),
    "noise_sigma": ("noise_sigma", float),
}


def parse_kv_text(text: str, source: str = "<config>") -> dict[str, str]:
    entries: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw.strip()!r}")
        entries[key] = value.strip()
    return entries


def parse_kv_file(path) -> dict[str, str]:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from None
    return parse_kv_text(text, str(path))


def dump_kv(entries: dict[str, object]) -> str:
    return "".join(f"{k}={v}\n" for k, v in entries.items())


def _convert(key: str, value: str, kind):
    try:
        if kind == "bool":
            low = value.lower()
            if low in _TRUE:
                return True
            if low in _FALSE:
                return False
            raise ValueError
        return kind(value)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {value!r}") from None


def section(entries: dict[str, str], prefix: str, schema: dict) -> dict[str, object]:
    """Pick ``prefix.key`` (or bare ``key``) entries that ``schema`` knows, converted.

    Prefixed keys the schema does not know are an error; unknown bare keys
    are left for other sections.
    """
    out: dict[str, object] = {}
    dotted = prefix + "."
    for key, value in entries.items():
        name = key[len(dotted):] if key.startswith(dotted) else key
        if name not in schema:
            if key.startswith(dotted):
                raise ConfigError(f"unknown config key {key!r}")
            continue
        field_name, kind = schema[name]
        if key.startswith(dotted) or field_name not in out:
            out[field_name] = _convert(key, value, kind)
    return out


def train_config(entries: dict[str, str] | None = None, **overrides):
    from .trainer import TrainConfig

    kwargs = section(entries or {}, "train", TRAIN_KEYS)
    kwargs.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig(**kwargs)


def data_config(entries: dict[str, str] | None = None, **overrides):
    from .data import DataGenConfig

    kwargs = section(entries or {}, "data", DATA_KEYS)
    kwargs.update({k: v for k, v in overrides.items() if v is not None})
    return DataGenConfig(**kwargs)
