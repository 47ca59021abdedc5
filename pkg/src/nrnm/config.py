"""Model/training configuration and the flat ``key = value`` config file."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path


class ConfigError(ValueError):
    """Invalid configuration or dataset specification."""


TASKS = ("copy", "lag_label", "pair_sim")


@dataclass
class ModelConfig:
    num_layers: int = 3
    hidden: int = 64
    input_dim: int = 9
    memory_layer: int | None = None  # 1-based; None -> ceil(num_layers / 2)
    memory: bool = True
    k: int = 8
    stride_set: tuple[int, ...] = (1, 3, 5)
    l: int | None = None  # units per scale; None -> k // min(stride_set)
    win: int = 4
    heads: int = 4
    memory_dim: int | None = None  # None -> hidden
    bidirectional: bool = False
    strict: bool = False
    task: str = "copy"
    num_classes: int = 8
    pair_mode: str = "concat_product"
    dropout: float = 0.5
    zoneout: float = 0.1
    ln_eps: float = 1e-5
    optimizer: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.0
    clip_norm: float = 5.0
    batch_size: int = 32
    steps: int = 1000
    eval_every: int = 100
    stop_at: float | None = None  # stop once the eval metric reaches this value
    seed: int = 0
    precision: int = 64

    def __post_init__(self):
        self.stride_set = tuple(int(s) for s in self.stride_set)
        if self.memory_layer is None:
            self.memory_layer = -(-self.num_layers // 2)
        if self.l is None:
            self.l = max(1, self.k // min(self.stride_set)) if self.stride_set else 1
        if self.memory_dim is None:
            self.memory_dim = self.hidden
        self.validate()

    @property
    def units(self) -> int:
        return self.l

    @property
    def rep_dim(self) -> int:
        return self.hidden * (2 if self.bidirectional else 1)

    def block_size(self, stride: int) -> int:
        return stride * self.l

    def validate(self) -> None:
        def need(cond: bool, msg: str) -> None:
            if not cond:
                raise ConfigError(msg)

        need(self.num_layers >= 1, "num_layers must be >= 1")
        need(self.hidden >= 1 and self.input_dim >= 1, "hidden and input_dim must be >= 1")
        need(1 <= self.memory_layer <= self.num_layers,
             f"memory_layer must lie in [1, {self.num_layers}]")
        need(self.task in TASKS, f"task must be one of {TASKS}")
        need(self.num_classes >= 2, "num_classes must be >= 2")
        need(self.pair_mode in ("concat", "concat_product"),
             "pair_mode must be 'concat' or 'concat_product'")
        need(0.0 <= self.dropout < 1.0, "dropout must lie in [0, 1)")
        need(0.0 <= self.zoneout < 1.0, "zoneout must lie in [0, 1)")
        need(self.optimizer in ("adam", "sgd"), "optimizer must be 'adam' or 'sgd'")
        need(self.precision in (32, 64), "precision must be 32 or 64")
        need(self.batch_size >= 1 and self.steps >= 0 and self.eval_every >= 1,
             "batch_size/eval_every must be >= 1, steps >= 0")
        if self.memory:
            need(len(self.stride_set) >= 1, "stride_set must not be empty")
            need(all(s >= 1 for s in self.stride_set), "strides must be >= 1")
            need(len(set(self.stride_set)) == len(self.stride_set), "strides must be distinct")
            need(self.k >= 1 and self.win >= 1 and self.l >= 1, "k, win and l must be >= 1")
            need(any(s * self.l == self.k for s in self.stride_set),
                 f"k={self.k} must equal stride*l for some stride in {self.stride_set} (l={self.l})")
            need(self.heads >= 1 and self.memory_dim % self.heads == 0,
                 f"heads={self.heads} must divide memory_dim={self.memory_dim}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["stride_set"] = list(self.stride_set)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


@dataclass
class DatasetSpec:
    task: str = "copy"
    T: int = 60
    lag: int = 10
    vocab: int = 8
    samples: int = 1000
    seed: int = 0
    families: int = 4
    motif_len: int = 8
    noise: float = 0.3
    dim: int = 4
    families_seed: int = 7

    def validate(self) -> None:
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}")
        if self.T < 2:
            raise ConfigError("T must be >= 2")
        if self.vocab < 2:
            raise ConfigError("vocab must be >= 2")
        if self.samples < 0:
            raise ConfigError("samples must be >= 0")
        if self.task == "lag_label" and not 0 <= self.lag < self.T:
            raise ConfigError(f"lag must satisfy 0 <= lag < T, got lag={self.lag}, T={self.T}")
        if self.task == "pair_sim":
            if self.families < 2:
                raise ConfigError("pair task needs at least 2 families")
            if not 1 <= self.motif_len <= self.T:
                raise ConfigError("motif_len must lie in [1, T]")
            if self.dim < 1 or self.noise < 0:
                raise ConfigError("dim must be >= 1 and noise >= 0")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


# flat config files ----------------------------------------------------------

_TRAIN_KEYS = {"optimizer", "lr", "momentum", "clip_norm", "batch_size", "steps",
               "eval_every", "stop_at", "seed", "precision", "dropout", "zoneout"}


@dataclass
class RunConfig:
    model: ModelConfig
    data: DatasetSpec
    eval_data: DatasetSpec
    extra: dict = field(default_factory=dict)


def _coerce(raw: str, default):
    raw = raw.strip()
    if isinstance(default, bool) or raw.lower() in ("true", "false"):
        if raw.lower() not in ("true", "false", "1", "0", "yes", "no"):
            raise ConfigError(f"expected a boolean, got {raw!r}")
        return raw.lower() in ("true", "1", "yes")
    if isinstance(default, tuple):
        return tuple(int(p) for p in raw.replace(",", " ").split())
    if raw.lower() == "none":
        return None
    for cast in (int, float):
        try:
            return cast(raw)
        except ValueError:
            pass
    return raw


def parse_config_text(text: str) -> dict[str, dict[str, object]]:
    """Parse ``prefix.key = value`` lines into {prefix: {key: value}}."""
    model_defaults = {f.name: f.default for f in fields(ModelConfig)}
    model_defaults["stride_set"] = ()
    data_defaults = {f.name: f.default for f in fields(DatasetSpec)}
    data_defaults.update(eval_samples=500, eval_seed=None, train_path="", eval_path="")
    out: dict[str, dict[str, object]] = {"model": {}, "data": {}, "train": {}}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        prefix, _, name = key.partition(".")
        if prefix == "model" and name in model_defaults:
            out["model"][name] = _coerce(raw, model_defaults[name])
        elif prefix == "data" and name in data_defaults:
            out["data"][name] = _coerce(raw, data_defaults[name])
        elif prefix == "train" and name in _TRAIN_KEYS:
            out["train"][name] = _coerce(raw, model_defaults[name])
        else:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
    return out


def load_run_config(path: str | Path, seed: int | None = None) -> RunConfig:
    parsed = parse_config_text(Path(path).read_text(encoding="utf-8"))
    model_kw = dict(parsed["model"])
    model_kw.update(parsed["train"])
    data_kw = dict(parsed["data"])
    extra = {k: data_kw.pop(k) for k in ("eval_samples", "eval_seed", "train_path", "eval_path")
             if k in data_kw}
    if seed is not None:
        model_kw["seed"] = seed
        data_kw["seed"] = seed
    data_kw.setdefault("task", model_kw.get("task", "copy"))
    model_kw.setdefault("task", data_kw["task"])
    data = DatasetSpec(**data_kw)
    data.validate()
    eval_seed = extra.get("eval_seed")
    eval_data = dataclasses.replace(
        data,
        samples=int(extra.get("eval_samples", 500)),
        seed=int(eval_seed) if eval_seed is not None else data.seed + 1_000_003,
    )
    try:
        model = ModelConfig(**model_kw)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    return RunConfig(model=model, data=data, eval_data=eval_data, extra=extra)
