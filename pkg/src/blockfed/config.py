"""Experiment configuration: YAML loading with full validation, defaults,
sweep expansion, and the run manifest round-trip.

Config files are nested YAML with sections `blockchain`, `fl`, `data`, `run`;
an empty file resolves to the documented defaults. Capacities accept the
string "inf" for an idealized zero-delay link.
"""

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field, replace

import yaml

KBIT = 1e3
MBIT = 1e6

FL_MODE_FULL = "full"
FL_MODE_CHAIN_ONLY = "chain-only"


class ConfigError(ValueError):
    """Invalid or unknown configuration; the message names the bad key."""


@dataclass
class ExperimentConfig:
    # blockchain
    max_block_txs: int = 10            # transactions per block cap
    block_interval_s: float = 15.0     # mean network block interval
    num_miners: int = 10
    p2p_capacity_mbps: float = 10.0    # math.inf for the idealized case
    tx_size_kbits: float = 796.84
    header_size_kbits: float = 20.0
    num_blocks: int = 50               # main-chain length at which the run stops
    verify_delay_s: float = 0.0
    hashpower: list | None = None      # per-miner shares; None = uniform

    # fl
    num_clients: int = 50
    mips: object = 4.744               # scalar, or list assigned round-robin
    client_capacity_mbps: float = 1.0
    epochs: int = 3
    batch_size: int = 20
    learning_rate: float = 0.01
    layer_sizes: list = field(default_factory=lambda: [784, 200, 200, 10])
    work_per_update: float = 2.8464e8  # instructions per local update
    fl_mode: str = FL_MODE_FULL        # "chain-only" skips the numerics, keeps timing
    update_store_dtype: str = "float32"
    export_weights: bool = False

    # data
    data_source: str = "synthetic"     # "synthetic" | "idx"
    train_images: str | None = None
    train_labels: str | None = None
    test_images: str | None = None
    test_labels: str | None = None
    synthetic_train: int = 2000
    synthetic_test: int = 500
    synthetic_noise: float = 1.0
    test_fraction: float = 0.3         # test share of the original test set

    # run
    seed: int = 1
    out_dir: str = "runs"
    trace: bool = False

    @property
    def tx_size_bits(self) -> float:
        return self.tx_size_kbits * KBIT

    @property
    def header_size_bits(self) -> float:
        return self.header_size_kbits * KBIT

    @property
    def p2p_capacity_bps(self) -> float:
        return self.p2p_capacity_mbps * MBIT if math.isfinite(self.p2p_capacity_mbps) else math.inf

    @property
    def client_capacity_bps(self) -> float:
        cap = self.client_capacity_mbps
        return cap * MBIT if math.isfinite(cap) else math.inf

    def mips_for(self, client: int) -> float:
        if isinstance(self.mips, (list, tuple)):
            return float(self.mips[client % len(self.mips)])
        return float(self.mips)


_SECTIONS = {
    "blockchain": [
        "max_block_txs", "block_interval_s", "num_miners", "p2p_capacity_mbps",
        "tx_size_kbits", "header_size_kbits", "num_blocks", "verify_delay_s",
        "hashpower",
    ],
    "fl": [
        "num_clients", "mips", "client_capacity_mbps", "epochs", "batch_size",
        "learning_rate", "layer_sizes", "work_per_update", "fl_mode",
        "update_store_dtype", "export_weights",
    ],
    "data": [
        "data_source", "train_images", "train_labels", "test_images",
        "test_labels", "synthetic_train", "synthetic_test", "synthetic_noise",
        "test_fraction",
    ],
    "run": ["seed", "out_dir", "trace"],
}

_FIELD_SECTION = {name: section for section, names in _SECTIONS.items() for name in names}


def _coerce_capacity(value, key: str) -> float:
    if isinstance(value, str):
        if value.strip().lower() in ("inf", "infinite", "infinity"):
            return math.inf
        raise ConfigError(f"{key}: expected a number or 'inf', got {value!r}")
    return float(value)


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Resolve a nested config mapping against the defaults, validating keys."""
    cfg = ExperimentConfig()
    raw = raw or {}
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    for section, entries in raw.items():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section {section!r}")
        if entries is None:
            continue
        if not isinstance(entries, dict):
            raise ConfigError(f"section {section!r} must be a mapping")
        for key, value in entries.items():
            if key not in _SECTIONS[section]:
                raise ConfigError(f"unknown key {section}.{key}")
            if key in ("p2p_capacity_mbps", "client_capacity_mbps"):
                value = _coerce_capacity(value, f"{section}.{key}")
            setattr(cfg, key, value)
    _validate(cfg)
    return cfg


def _require_positive(cfg: ExperimentConfig, names: list[str]) -> None:
    for name in names:
        value = getattr(cfg, name)
        if not isinstance(value, (int, float)) or not value > 0:
            raise ConfigError(f"{_FIELD_SECTION[name]}.{name} must be positive, got {value!r}")


def _validate(cfg: ExperimentConfig) -> None:
    _require_positive(cfg, [
        "max_block_txs", "block_interval_s", "num_miners", "p2p_capacity_mbps",
        "tx_size_kbits", "header_size_kbits", "num_blocks", "num_clients",
        "client_capacity_mbps", "epochs", "batch_size", "learning_rate",
        "work_per_update", "synthetic_train", "synthetic_test",
    ])
    if cfg.verify_delay_s < 0:
        raise ConfigError("blockchain.verify_delay_s must be >= 0")
    if isinstance(cfg.mips, (list, tuple)):
        if not cfg.mips or any(m <= 0 for m in cfg.mips):
            raise ConfigError("fl.mips entries must be positive")
    elif not (isinstance(cfg.mips, (int, float)) and cfg.mips > 0):
        raise ConfigError(f"fl.mips must be positive, got {cfg.mips!r}")
    if cfg.hashpower is not None:
        if len(cfg.hashpower) != cfg.num_miners:
            raise ConfigError("blockchain.hashpower must list one share per miner")
        if any(h <= 0 for h in cfg.hashpower):
            raise ConfigError("blockchain.hashpower shares must be positive")
    if not isinstance(cfg.layer_sizes, (list, tuple)) or len(cfg.layer_sizes) < 2:
        raise ConfigError("fl.layer_sizes needs at least input and output sizes")
    if any(not isinstance(s, int) or s <= 0 for s in cfg.layer_sizes):
        raise ConfigError("fl.layer_sizes entries must be positive integers")
    if cfg.fl_mode not in (FL_MODE_FULL, FL_MODE_CHAIN_ONLY):
        raise ConfigError(f"fl.fl_mode must be 'full' or 'chain-only', got {cfg.fl_mode!r}")
    if cfg.update_store_dtype not in ("float32", "float64"):
        raise ConfigError("fl.update_store_dtype must be 'float32' or 'float64'")
    if cfg.data_source not in ("synthetic", "idx"):
        raise ConfigError(f"data.data_source must be 'synthetic' or 'idx', got {cfg.data_source!r}")
    if cfg.data_source == "idx" and cfg.fl_mode == FL_MODE_FULL:
        for key in ("train_images", "train_labels", "test_images", "test_labels"):
            if not getattr(cfg, key):
                raise ConfigError(f"data.{key} is required when data.data_source is 'idx'")
    if not 0.0 < cfg.test_fraction < 1.0:
        raise ConfigError("data.test_fraction must be in (0, 1)")
    if not isinstance(cfg.seed, int) or cfg.seed < 0:
        raise ConfigError(f"run.seed must be a non-negative integer, got {cfg.seed!r}")


def config_to_dict(cfg: ExperimentConfig) -> dict:
    """Nested mapping mirroring the file schema; round-trips via config_from_dict."""
    flat = asdict(cfg)
    out: dict = {}
    for section, names in _SECTIONS.items():
        out[section] = {}
        for name in names:
            value = flat[name]
            if name in ("p2p_capacity_mbps", "client_capacity_mbps") and math.isinf(value):
                value = "inf"
            out[section][name] = value
    return out


def load_config(path: str) -> ExperimentConfig:
    """Load a config file (or a run manifest, via its `config` section)."""
    with open(path, "r", encoding="utf-8") as f:
        raw = yaml.safe_load(f)
    if isinstance(raw, dict) and "config" in raw:
        raw = raw["config"]
    return config_from_dict(raw)


def config_hash(cfg: ExperimentConfig) -> str:
    """Short stable digest of the resolved config (seed excluded)."""
    payload = config_to_dict(cfg)
    payload["run"] = {k: v for k, v in payload["run"].items() if k not in ("seed", "out_dir")}
    blob = json.dumps(payload, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:10]


def run_id(cfg: ExperimentConfig) -> str:
    return f"{config_hash(cfg)}-s{cfg.seed}"


def derive_seed(global_seed: int, run_index: int) -> int:
    """Reproducible per-run seed for sweeps: hash(global seed, run index)."""
    digest = hashlib.sha256(f"{global_seed}:{run_index}".encode("utf-8")).digest()
    return int.from_bytes(digest[:4], "little") % (2**31)


@dataclass
class SweepSpec:
    """Cartesian grid over dotted config keys, with seeded replications."""

    base: dict
    grid: dict[str, list]            # e.g. {"blockchain.block_interval_s": [5, 15, 60]}
    replications: int = 1
    seed: int = 1

    def expand(self) -> list[ExperimentConfig]:
        keys = sorted(self.grid)
        combos: list[list] = [[]]
        for key in keys:
            values = self.grid[key]
            if not isinstance(values, list) or not values:
                raise ConfigError(f"sweep.{key} must be a nonempty list")
            combos = [prev + [v] for prev in combos for v in values]
        configs = []
        index = 0
        for combo in combos:
            for _ in range(self.replications):
                raw = json.loads(json.dumps(self.base or {}))
                for key, value in zip(keys, combo):
                    section, _, name = key.partition(".")
                    if not name:
                        raise ConfigError(f"sweep key {key!r} must be section.name")
                    raw.setdefault(section, {})[name] = value
                raw.setdefault("run", {})["seed"] = derive_seed(self.seed, index)
                configs.append(config_from_dict(raw))
                index += 1
        return configs


def load_sweep(path: str) -> SweepSpec:
    with open(path, "r", encoding="utf-8") as f:
        raw = yaml.safe_load(f) or {}
    if not isinstance(raw, dict) or "sweep" not in raw:
        raise ConfigError("sweep file must contain a 'sweep' mapping")
    spec = SweepSpec(
        base=raw.get("base", {}) or {},
        grid=raw["sweep"] or {},
        replications=int(raw.get("replications", 1)),
        seed=int(raw.get("seed", 1)),
    )
    if spec.replications < 1:
        raise ConfigError("replications must be >= 1")
    config_from_dict(spec.base)  # validate the base eagerly
    return spec


def with_overrides(cfg: ExperimentConfig, **kwargs) -> ExperimentConfig:
    out = replace(cfg, **kwargs)
    _validate(out)
    return out
