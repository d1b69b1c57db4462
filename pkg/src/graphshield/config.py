"""Run configuration: defaults, key/value config files, and flag overrides.

Config files are UTF-8 text, one ``key = value`` per line, ``#`` comments.
Keys mirror the dataclass fields below. Dataset paths resolve against the
``GRAPHSHIELD_DATA_DIR`` environment variable when relative; the pseudo-path
``synth:trust:key=value,...`` generates the built-in synthetic trust network.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass, field, fields, replace

DATA_DIR_ENV = "GRAPHSHIELD_DATA_DIR"


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    dataset: str = "synth:trust:nodes=500,weeks=40,seed=0"
    freq: str = "biweekly"          # table step counts come from 14-day buckets
    train_steps: int = 0            # 0 = auto: floor(0.7 T)
    risk_ratio: float = 0.10
    unlabeled_ratio: float = 0.0
    seed: int = 0

    dim: int = 64
    layers: int = 3
    heads: int = 4
    head_hidden: tuple[int, ...] = (32, 16)   # plus the final K-wide layer
    components: int = 2
    tau3: float = 0.9

    epochs: int = -1                # -1 = auto: 200 for bitcoin/synth, 300 otherwise
    lr: float = 1e-4
    recon_mode: str = "auto"
    ablation: str = "full"          # full | supervised (drops the mixture term)
    normalize_label_term: bool = True
    normalize_recon: bool = True

    # causality settings
    lags: tuple[int, ...] = (1, 2, 3)
    lambda1: float = -1.0           # < 0 = AIC over the log grid
    lambda2: float = -1.0
    alpha: float = 0.05
    strict_paper: bool = False

    jobs: int = 1
    out: str = "runs"

    # csv schema
    col_src: int = 0
    col_dst: int = 1
    col_weight: int = 2
    col_time: int = 3
    delimiter: str = ","
    has_header: bool = False

    def resolved_epochs(self) -> int:
        if self.epochs >= 0:
            return self.epochs
        name = self.dataset.lower()
        return 200 if ("bitcoin" in name or name.startswith("synth:")) else 300

    def validate(self) -> None:
        if not (0 < self.risk_ratio < 1):
            raise ConfigError(f"risk_ratio: must be in (0,1), got {self.risk_ratio}")
        if not (0 <= self.unlabeled_ratio < 1):
            raise ConfigError(f"unlabeled_ratio: must be in [0,1), got {self.unlabeled_ratio}")
        if not (0 <= self.tau3 <= 1):
            raise ConfigError(f"tau3: must be in [0,1], got {self.tau3}")
        if self.lr <= 0:
            raise ConfigError(f"lr: must be positive, got {self.lr}")
        if self.ablation not in ("full", "supervised"):
            raise ConfigError(f"ablation: unknown mode {self.ablation!r}")
        if self.dim % self.heads or self.dim % 2:
            raise ConfigError(f"dim: {self.dim} must be even and divisible by heads")
        if self.components < 2:
            raise ConfigError(f"components: need >= 2, got {self.components}")
        if self.jobs < 1:
            raise ConfigError(f"jobs: must be >= 1, got {self.jobs}")

    def dataset_path(self) -> str:
        if self.dataset.startswith("synth:"):
            return self.dataset
        if os.path.isabs(self.dataset):
            return self.dataset
        root = os.environ.get(DATA_DIR_ENV, "")
        cand = os.path.join(root, self.dataset) if root else self.dataset
        return cand

    def canonical_items(self) -> list[tuple[str, str]]:
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                s = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                s = "true" if v else "false"
            elif isinstance(v, float):
                s = repr(v)
            else:
                s = str(v)
            out.append((f.name, s))
        return out

    def canonical_text(self) -> str:
        return "\n".join(f"{k} = {v}" for k, v in self.canonical_items()) + "\n"

    def run_id(self) -> str:
        return hashlib.sha256(self.canonical_text().encode("utf-8")).hexdigest()[:12]


_BOOL_WORDS = {"true": True, "1": True, "yes": True, "on": True,
               "false": False, "0": False, "no": False, "off": False}


def _coerce(name: str, raw: str, kind) -> object:
    raw = raw.strip()
    try:
        if kind is bool:
            if raw.lower() not in _BOOL_WORDS:
                raise ValueError(f"not a boolean: {raw!r}")
            return _BOOL_WORDS[raw.lower()]
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is str:
            return raw
        if kind == tuple[int, ...]:
            return tuple(int(x) for x in raw.split(",") if x.strip())
    except ValueError as err:
        raise ConfigError(f"{name}: {err}") from err
    raise ConfigError(f"{name}: unsupported config field type {kind}")


def parse_config_file(path) -> dict[str, object]:
    """Read ``key = value`` lines; unknown keys are an error naming the key."""
    known = {f.name: f.type for f in fields(RunConfig)}
    typemap = {f.name: type(getattr(RunConfig(), f.name)) for f in fields(RunConfig)}
    out: dict[str, object] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            body = line.split("#", 1)[0].strip()
            if not body:
                continue
            if "=" not in body:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, _, raw = body.partition("=")
            key = key.strip()
            if key not in known:
                raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
            kind = typemap[key]
            if kind is tuple:
                out[key] = tuple(int(x) for x in raw.split(",") if x.strip())
            else:
                out[key] = _coerce(key, raw, kind)
    return out


def load_config(path: str | None = None, **overrides) -> RunConfig:
    """Defaults, then config file, then explicit overrides (None skipped)."""
    values: dict[str, object] = {}
    if path:
        values.update(parse_config_file(path))
    for k, v in overrides.items():
        if v is not None:
            values[k] = v
    cfg = replace(RunConfig(), **values)
    cfg.validate()
    return cfg
