"""Flat INI run configuration with strict schema validation.

One section per pipeline module. Unknown sections or keys are hard errors
so typos never pass silently; every key can be overridden by an
environment variable named SEMREC_<SECTION>_<KEY>. Relative paths resolve
against the config file's directory.

The canonical serialization (schema order, resolved values, with the
run-location keys out_dir/cache_dir omitted) identifies an experiment:
its digest keys the stage cache and is embedded in every report.
"""

from __future__ import annotations

import configparser
import os

from .adapters import ARCHITECTURES, AdapterSpec
from .embedding_io import POOLING_STRATEGIES
from .fusion import STRATEGIES, FusionSpec
from .hashing import digest_text
from .seqrec import SasrecConfig

TEXT_SOURCES = ("sac", "keyword", "summary", "expansion")
ENV_PREFIX = "SEMREC"
# execution locations, excluded from the canonical text and digest
_NON_IDENTITY = {("run", "out_dir"), ("run", "cache_dir")}

_REQUIRED = object()

# section -> key -> default ("" = optional empty, _REQUIRED = must be set)
SCHEMA = {
    "data": {
        "catalog": _REQUIRED,
        "interactions": _REQUIRED,
        "min_length": "5",
        "text_source": "sac",
        "keyword_file": "",
        "summary_file": "",
        "expansion_file": "",
    },
    "embedding": {
        "tokens": _REQUIRED,
        "tokens_eol": "",
        "pooling": "mean",
    },
    "adapter": {
        "architecture": "linear",
        "use_pca": "false",
        "d_pca": "",
        "experts": "8",
        "pq_m": "8",
        "pq_k": "",
        "pq_iters": "25",
        "pq_restarts": "3",
        "fit_seed": "0",
    },
    "fusion": {
        "strategy": "replace",
        "align_weight": "",
        "id_origin": "pretrained",
        "id_checkpoint": "",
    },
    "sasrec": {
        "max_len": "50",
        "blocks": "2",
        "heads": "1",
        "d": "64",
        "dropout": "0.2",
        "lr": "0.001",
        "batch_size": "128",
        "epochs": "50",
        "patience": "10",
        "loss": "bce",
    },
    "run": {
        "seeds": "42,43,44",
        "out_dir": "",
        "cache_dir": "",
    },
}

_CHOICES = {
    ("data", "text_source"): TEXT_SOURCES,
    ("embedding", "pooling"): POOLING_STRATEGIES,
    ("adapter", "architecture"): ARCHITECTURES,
    ("fusion", "strategy"): STRATEGIES,
    ("fusion", "id_origin"): ("pretrained", "fresh"),
    ("sasrec", "loss"): ("bce", "softmax"),
}

DEFAULT_ALIGN_WEIGHT = 0.1


class ConfigError(ValueError):
    pass


class RunConfig:
    """Validated key-value view over one run's configuration."""

    def __init__(self, raw: dict, base_dir: str = "."):
        self.raw = {sec: dict(keys) for sec, keys in raw.items()}
        self.base_dir = base_dir
        self._validate()

    # -- loading ------------------------------------------------------------

    @classmethod
    def load(cls, path, env=None) -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None)
        read = parser.read(path, encoding="utf-8")
        if not read:
            raise ConfigError(f"cannot read config file {path}")
        raw = {}
        for section in parser.sections():
            if section not in SCHEMA:
                raise ConfigError(f"unknown config section [{section}]")
            raw[section] = {}
            for key, value in parser.items(section):
                if key not in SCHEMA[section]:
                    raise ConfigError(f"unknown config key {section}.{key}")
                raw[section][key] = value
        raw = _fill_defaults(raw)
        raw = _apply_env(raw, os.environ if env is None else env)
        return cls(raw, base_dir=os.path.dirname(os.path.abspath(path)))

    @classmethod
    def from_defaults(cls, overrides: dict, base_dir: str = ".") -> "RunConfig":
        """Build a config from schema defaults plus {"sec.key": value}."""
        raw = _fill_defaults({})
        for dotted, value in overrides.items():
            sec, key = _split_dotted(dotted)
            raw[sec][key] = str(value)
        return cls(raw, base_dir=base_dir)

    def with_value(self, dotted: str, value) -> "RunConfig":
        """A copy with one key replaced (grid axes use this)."""
        sec, key = _split_dotted(dotted)
        raw = {s: dict(ks) for s, ks in self.raw.items()}
        raw[sec][key] = str(value)
        return RunConfig(raw, base_dir=self.base_dir)

    # -- validation ---------------------------------------------------------

    def _validate(self):
        for section, keys in self.raw.items():
            if section not in SCHEMA:
                raise ConfigError(f"unknown config section [{section}]")
            for key in keys:
                if key not in SCHEMA[section]:
                    raise ConfigError(f"unknown config key {section}.{key}")
        for section, keys in SCHEMA.items():
            for key, default in keys.items():
                if self.raw.get(section, {}).get(key) is None:
                    raise ConfigError(f"missing config key {section}.{key}")
                if default is _REQUIRED and not self.raw[section][key]:
                    raise ConfigError(f"config key {section}.{key} must be set")
        for (sec, key), choices in _CHOICES.items():
            value = self.raw[sec][key]
            if value not in choices:
                raise ConfigError(f"{sec}.{key} must be one of {choices}, got {value!r}")
        # parse everything typed once so bad values fail at load time
        self.sasrec_config()
        self.fusion_spec()
        self.seeds()
        self._int("data", "min_length")
        self._int("adapter", "fit_seed")
        self._bool("adapter", "use_pca")
        for key in ("experts", "pq_m", "pq_iters", "pq_restarts"):
            self._int("adapter", key)
        for key in ("d_pca", "pq_k"):
            if self.raw["adapter"][key]:
                self._int("adapter", key)
        if self.raw["data"]["text_source"] != "sac":
            source = self.raw["data"]["text_source"]
            if not self.raw["data"][f"{source}_file"]:
                raise ConfigError(f"data.text_source={source} requires data.{source}_file")
        if (self.raw["fusion"]["strategy"] == "align"
                and self.raw["fusion"]["id_origin"] == "fresh"):
            raise ConfigError("alignment requires a pretrained ID checkpoint "
                              "(fusion.id_origin cannot be 'fresh')")

    # -- typed accessors ----------------------------------------------------

    def _int(self, sec, key):
        try:
            return int(self.raw[sec][key])
        except ValueError:
            raise ConfigError(f"{sec}.{key} must be an integer, "
                              f"got {self.raw[sec][key]!r}") from None

    def _float(self, sec, key):
        try:
            return float(self.raw[sec][key])
        except ValueError:
            raise ConfigError(f"{sec}.{key} must be a number, "
                              f"got {self.raw[sec][key]!r}") from None

    def _bool(self, sec, key):
        value = self.raw[sec][key].lower()
        if value in ("true", "yes", "1"):
            return True
        if value in ("false", "no", "0"):
            return False
        raise ConfigError(f"{sec}.{key} must be a boolean, got {value!r}")

    def _path(self, sec, key):
        value = self.raw[sec][key]
        if not value:
            return None
        return value if os.path.isabs(value) else os.path.join(self.base_dir, value)

    def catalog_path(self):
        return self._path("data", "catalog")

    def interactions_path(self):
        return self._path("data", "interactions")

    def enhanced_text_path(self):
        source = self.raw["data"]["text_source"]
        return None if source == "sac" else self._path("data", f"{source}_file")

    def min_length(self):
        return self._int("data", "min_length")

    def text_source(self):
        return self.raw["data"]["text_source"]

    def pooling(self):
        return self.raw["embedding"]["pooling"]

    def tokens_path(self):
        """The token file the configured pooling reads: the EOL variant for
        eol pooling when one is configured, else the main file."""
        if self.pooling() == "eol" and self.raw["embedding"]["tokens_eol"]:
            return self._path("embedding", "tokens_eol")
        return self._path("embedding", "tokens")

    def adapter_spec(self, input_dim: int) -> AdapterSpec:
        d_pca = self.raw["adapter"]["d_pca"]
        pq_k = self.raw["adapter"]["pq_k"]
        arch = self.raw["adapter"]["architecture"]
        try:
            return AdapterSpec(
                architecture=arch,
                input_dim=input_dim,
                d=self._int("sasrec", "d"),
                use_pca_preprocess=(self._bool("adapter", "use_pca")
                                    and arch != "pca_only"),
                d_pca=int(d_pca) if d_pca else None,
                experts=self._int("adapter", "experts"),
                pq_m=self._int("adapter", "pq_m"),
                pq_k=int(pq_k) if pq_k else None,
                pq_iters=self._int("adapter", "pq_iters"),
                pq_restarts=self._int("adapter", "pq_restarts"),
            )
        except ValueError as err:
            raise ConfigError(f"adapter: {err}") from None

    def fit_seed(self):
        return self._int("adapter", "fit_seed")

    def fusion_spec(self) -> FusionSpec:
        strategy = self.raw["fusion"]["strategy"]
        weight_raw = self.raw["fusion"]["align_weight"]
        if strategy == "align":
            weight = float(weight_raw) if weight_raw else DEFAULT_ALIGN_WEIGHT
        else:
            weight = float(weight_raw) if weight_raw else 0.0
        try:
            return FusionSpec(strategy=strategy, align_weight=weight)
        except ValueError as err:
            raise ConfigError(f"fusion: {err}") from None

    def id_origin(self):
        return self.raw["fusion"]["id_origin"]

    def id_checkpoint_path(self):
        return self._path("fusion", "id_checkpoint")

    def sasrec_config(self) -> SasrecConfig:
        try:
            return SasrecConfig(
                max_len=self._int("sasrec", "max_len"),
                blocks=self._int("sasrec", "blocks"),
                heads=self._int("sasrec", "heads"),
                d=self._int("sasrec", "d"),
                dropout=self._float("sasrec", "dropout"),
                lr=self._float("sasrec", "lr"),
                batch_size=self._int("sasrec", "batch_size"),
                epochs=self._int("sasrec", "epochs"),
                patience=self._int("sasrec", "patience"),
                loss=self.raw["sasrec"]["loss"],
            )
        except ValueError as err:
            raise ConfigError(f"sasrec: {err}") from None

    def seeds(self):
        text = self.raw["run"]["seeds"]
        try:
            seeds = tuple(int(s.strip()) for s in text.split(",") if s.strip())
        except ValueError:
            raise ConfigError(f"run.seeds must be comma-separated integers, "
                              f"got {text!r}") from None
        if not seeds:
            raise ConfigError("run.seeds must list at least one seed")
        return seeds

    def out_dir(self):
        return self._path("run", "out_dir")

    def cache_dir(self):
        return self._path("run", "cache_dir")

    # -- identity -----------------------------------------------------------

    def canonical_text(self) -> str:
        """Schema-ordered serialization without the run-location keys."""
        lines = []
        for section, keys in SCHEMA.items():
            lines.append(f"[{section}]")
            for key in keys:
                if (section, key) in _NON_IDENTITY:
                    continue
                lines.append(f"{key} = {self.raw[section][key]}")
            lines.append("")
        return "\n".join(lines)

    @property
    def digest(self) -> str:
        return digest_text(self.canonical_text())


def _split_dotted(dotted: str):
    if dotted.count(".") != 1:
        raise ConfigError(f"expected section.key, got {dotted!r}")
    sec, key = dotted.split(".")
    if sec not in SCHEMA or key not in SCHEMA[sec]:
        raise ConfigError(f"unknown config key {dotted}")
    return sec, key


def _fill_defaults(raw: dict) -> dict:
    filled = {}
    for section, keys in SCHEMA.items():
        filled[section] = {}
        for key, default in keys.items():
            value = raw.get(section, {}).get(key)
            if value is None:
                value = "" if default is _REQUIRED else default
            filled[section][key] = value
    return filled


def _apply_env(raw: dict, env) -> dict:
    for section, keys in SCHEMA.items():
        for key in keys:
            value = env.get(f"{ENV_PREFIX}_{section.upper()}_{key.upper()}")
            if value is not None:
                raw[section][key] = value
    return raw
