"""Flat sectioned key-value run configuration.

Grammar (one directive per line):

    [section]          starts a section
    key = value        assigns within the current section
    # comment          (also ';'); blank lines ignored

No quoting, no escapes, no multi-line values. Unknown sections or keys are
rejected. Every error message is anchored to the offending file and line.
Command-line flags override file values before validation.
"""

from __future__ import annotations

from dataclasses import dataclass

from .compression import Q0_8_UNSIGNED, Q4_4
from .data import KINDS, SyntheticTask
from .errors import ConfigError
from .model import ModelConfig
from .tensor import CompressionConfig
from .trainer import RunConfig

_SCHEMA = {
    "model": {"blocks", "hidden", "heads", "max_seq", "pre_norm"},
    "task": {"kind", "vocab", "seq_len", "num_classes", "train_size", "val_size",
             "seed", "noise"},
    "train": {"scheduler", "freeze_rate", "epochs", "batch_size", "seed", "lr",
              "warmup", "optimizer", "weight_decay", "pretrain_steps", "pretrain_lr",
              "pretrain_task_seed", "pin_active", "global_step_bias"},
    "compression": {"quant_dense", "quant_matmul_softmax", "quant_gelu",
                    "prune_layernorm", "keep_frac", "softmax_spec"},
    "sweep": {"schedulers", "freeze_rates", "jobs"},
    "output": {"dir", "plots"},
}

_TRUE = {"on", "true", "yes", "1"}
_FALSE = {"off", "false", "no", "0"}


class ConfigFile:
    """Parsed config: values plus the line each one came from."""

    def __init__(self, path: str):
        self.path = path
        self.values = {}   # (section, key) -> str
        self.lines = {}    # (section, key) -> line number
        self._parse()

    def _err(self, lineno: int, message: str) -> ConfigError:
        return ConfigError(f"{self.path}:{lineno}: {message}")

    def _parse(self):
        section = None
        with open(self.path) as f:
            for lineno, raw in enumerate(f, start=1):
                line = raw.strip()
                if not line or line[0] in "#;":
                    continue
                if line.startswith("["):
                    if not line.endswith("]"):
                        raise self._err(lineno, f"malformed section header {line!r}")
                    section = line[1:-1].strip()
                    if section not in _SCHEMA:
                        raise self._err(lineno, f"unknown section [{section}]")
                    continue
                if "=" not in line:
                    raise self._err(lineno, f"expected 'key = value', got {line!r}")
                if section is None:
                    raise self._err(lineno, "assignment before any [section]")
                key, _, value = line.partition("=")
                key = key.strip()
                if key not in _SCHEMA[section]:
                    raise self._err(lineno, f"unknown key {key!r} in section [{section}]")
                self.values[(section, key)] = value.strip()
                self.lines[(section, key)] = lineno

    # -- typed getters ------------------------------------------------------

    def _where(self, section, key):
        lineno = self.lines.get((section, key))
        return f"{self.path}:{lineno}" if lineno else self.path

    def has(self, section, key):
        return (section, key) in self.values

    def set(self, section, key, value):
        self.values[(section, key)] = str(value)
        self.lines.setdefault((section, key), 0)

    def get_str(self, section, key, default=None, choices=None):
        raw = self.values.get((section, key))
        if raw is None:
            if default is None and choices is not None:
                raise ConfigError(f"{self.path}: missing required key {section}.{key}")
            return default
        if choices is not None and raw not in choices:
            raise ConfigError(f"{self._where(section, key)}: {key} must be one of "
                              f"{sorted(choices)}, got {raw!r}")
        return raw

    def get_int(self, section, key, default=None, minimum=None):
        raw = self.values.get((section, key))
        if raw is None:
            return default
        try:
            val = int(raw)
        except ValueError:
            raise ConfigError(f"{self._where(section, key)}: {key} must be an integer, "
                              f"got {raw!r}") from None
        if minimum is not None and val < minimum:
            raise ConfigError(f"{self._where(section, key)}: {key} must be >= {minimum}, got {val}")
        return val

    def get_float(self, section, key, default=None, lo=None, hi=None, hi_open=False):
        raw = self.values.get((section, key))
        if raw is None:
            return default
        try:
            val = float(raw)
        except ValueError:
            raise ConfigError(f"{self._where(section, key)}: {key} must be a number, "
                              f"got {raw!r}") from None
        if lo is not None and val < lo:
            raise ConfigError(f"{self._where(section, key)}: {key} must be >= {lo}, got {val}")
        if hi is not None and (val > hi or (hi_open and val == hi)):
            bound = f"< {hi}" if hi_open else f"<= {hi}"
            raise ConfigError(f"{self._where(section, key)}: {key} must be {bound}, got {val}")
        return val

    def get_bool(self, section, key, default=None):
        raw = self.values.get((section, key))
        if raw is None:
            return default
        low = raw.lower()
        if low in _TRUE:
            return True
        if low in _FALSE:
            return False
        raise ConfigError(f"{self._where(section, key)}: {key} must be on/off, got {raw!r}")


@dataclass
class ResolvedRun:
    """Everything a command needs, assembled from file plus flag overrides."""

    model: ModelConfig
    task: SyntheticTask
    run: RunConfig
    pretrain_steps: int = 0
    pretrain_lr: float = 1e-3
    pretrain_task_seed: int | None = None
    out_dir: str = "out"
    plots: bool = True
    sweep_schedulers: tuple = ("ils", "random", "progressive")
    sweep_rates: tuple = (0.0, 0.5, 0.9)
    sweep_jobs: int = 1

    def echo_lines(self) -> list[str]:
        """The resolved configuration in config-file syntax."""
        m, t, r = self.model, self.task, self.run
        c = r.compression or CompressionConfig()

        def b(x):
            return "on" if x else "off"

        return [
            "[model]",
            f"blocks = {m.blocks}", f"hidden = {m.hidden}", f"heads = {m.heads}",
            f"max_seq = {m.max_seq}", f"pre_norm = {b(m.pre_norm)}",
            "",
            "[task]",
            f"kind = {t.kind}", f"vocab = {t.vocab}", f"seq_len = {t.seq_len}",
            f"num_classes = {t.num_classes}", f"train_size = {t.train_size}",
            f"val_size = {t.val_size}", f"seed = {t.seed}", f"noise = {t.noise}",
            "",
            "[train]",
            f"scheduler = {r.scheduler}", f"freeze_rate = {r.freeze_rate}",
            f"epochs = {r.epochs}", f"batch_size = {r.batch_size}", f"seed = {r.seed}",
            f"lr = {r.lr}", f"warmup = {r.warmup_frac}", f"optimizer = {r.optimizer}",
            f"weight_decay = {r.weight_decay}",
            f"pretrain_steps = {self.pretrain_steps}", f"pretrain_lr = {self.pretrain_lr}",
            f"pretrain_task_seed = {self.pretrain_task_seed}",
            "",
            "[compression]",
            f"quant_dense = {b(c.quant_dense)}",
            f"quant_matmul_softmax = {b(c.quant_matmul_softmax)}",
            f"quant_gelu = {b(c.quant_gelu)}",
            f"prune_layernorm = {b(c.prune_layernorm)}",
            f"keep_frac = {c.keep_frac}",
            "",
            "[output]",
            f"dir = {self.out_dir}", f"plots = {b(self.plots)}",
        ]


_FLAG_MAP = {
    "seed": ("train", "seed"),
    "freeze_rate": ("train", "freeze_rate"),
    "scheduler": ("train", "scheduler"),
    "epochs": ("train", "epochs"),
    "batch_size": ("train", "batch_size"),
    "out_dir": ("output", "dir"),
    "plots": ("output", "plots"),
    "jobs": ("sweep", "jobs"),
    "freeze_rates": ("sweep", "freeze_rates"),
}


def resolve(path: str, overrides: dict | None = None) -> ResolvedRun:
    """Parse a config file, apply flag overrides, validate, and assemble."""
    cfg = ConfigFile(path)
    overrides = {k: v for k, v in (overrides or {}).items() if v is not None}
    for flag, value in overrides.items():
        if flag in _FLAG_MAP:
            section, key = _FLAG_MAP[flag]
            cfg.set(section, key, value)
        elif flag == "quant":
            for key in ("quant_dense", "quant_matmul_softmax", "quant_gelu"):
                cfg.set("compression", key, value)
        elif flag == "prune":
            cfg.set("compression", "prune_layernorm", value)
        else:
            raise ConfigError(f"unknown override flag {flag!r}")

    model = ModelConfig(
        blocks=cfg.get_int("model", "blocks", 3, minimum=1),
        hidden=cfg.get_int("model", "hidden", 32, minimum=1),
        heads=cfg.get_int("model", "heads", 4, minimum=1),
        max_seq=cfg.get_int("model", "max_seq", 16, minimum=1),
        vocab=cfg.get_int("task", "vocab", 64, minimum=1),
        num_classes=cfg.get_int("task", "num_classes", 4, minimum=1),
        pre_norm=cfg.get_bool("model", "pre_norm", False),
    )
    try:
        model.validate()
    except ConfigError as exc:
        where = cfg._where("model", "hidden")
        raise ConfigError(f"{where}: {exc}") from None

    task = SyntheticTask(
        kind=cfg.get_str("task", "kind", "cluster-tokens", choices=set(KINDS)),
        vocab=model.vocab,
        seq_len=cfg.get_int("task", "seq_len", model.max_seq, minimum=1),
        num_classes=model.num_classes,
        train_size=cfg.get_int("task", "train_size", 2048, minimum=1),
        val_size=cfg.get_int("task", "val_size", 512, minimum=1),
        seed=cfg.get_int("task", "seed", 0),
        noise=cfg.get_float("task", "noise", 0.35, lo=0.0, hi=1.0, hi_open=True),
    )
    if task.seq_len > model.max_seq:
        raise ConfigError(f"{cfg._where('task', 'seq_len')}: seq_len {task.seq_len} "
                          f"exceeds model max_seq {model.max_seq}")

    seed = cfg.get_int("train", "seed", None)
    if seed is None:
        raise ConfigError(f"{path}: [train] seed is required (give it in the file "
                          "or with --seed)")

    compression = CompressionConfig(
        quant_dense=cfg.get_bool("compression", "quant_dense", False),
        quant_matmul_softmax=cfg.get_bool("compression", "quant_matmul_softmax", False),
        quant_gelu=cfg.get_bool("compression", "quant_gelu", False),
        prune_layernorm=cfg.get_bool("compression", "prune_layernorm", False),
        keep_frac=cfg.get_float("compression", "keep_frac", 0.1, lo=1e-6, hi=1.0),
        matmul_softmax_spec=(Q0_8_UNSIGNED
                             if cfg.get_str("compression", "softmax_spec", "q4.4",
                                            choices={"q4.4", "q0.8"}) == "q0.8"
                             else Q4_4),
    )
    if not (compression.quant_dense or compression.quant_matmul_softmax
            or compression.quant_gelu or compression.prune_layernorm):
        compression = None

    pin_raw = cfg.get_str("train", "pin_active", "")
    pinned = tuple(int(x) for x in pin_raw.replace(",", " ").split()) if pin_raw else ()

    run = RunConfig(
        scheduler=cfg.get_str("train", "scheduler", "ils",
                              choices={"ils", "random", "progressive", "none"}),
        freeze_rate=cfg.get_float("train", "freeze_rate", 0.0, lo=0.0, hi=1.0, hi_open=True),
        epochs=cfg.get_int("train", "epochs", 3, minimum=1),
        batch_size=cfg.get_int("train", "batch_size", 32, minimum=1),
        seed=seed,
        lr=cfg.get_float("train", "lr", 1e-3, lo=0.0),
        warmup_frac=cfg.get_float("train", "warmup", 0.1, lo=0.0, hi=1.0),
        optimizer=cfg.get_str("train", "optimizer", "adamw", choices={"sgd", "adamw"}),
        weight_decay=cfg.get_float("train", "weight_decay", 0.01, lo=0.0),
        global_step_bias=cfg.get_bool("train", "global_step_bias", False),
        compression=compression,
        pinned_active=pinned,
    )

    rates_raw = cfg.get_str("sweep", "freeze_rates", "0,0.5,0.9")
    try:
        rates = tuple(float(x) for x in rates_raw.replace(",", " ").split())
    except ValueError:
        raise ConfigError(f"{cfg._where('sweep', 'freeze_rates')}: freeze_rates must be "
                          f"numbers, got {rates_raw!r}") from None
    scheds_raw = cfg.get_str("sweep", "schedulers", "ils,random,progressive")
    scheds = tuple(s for s in scheds_raw.replace(",", " ").split())
    for s in scheds:
        if s not in ("ils", "random", "progressive", "none"):
            raise ConfigError(f"{cfg._where('sweep', 'schedulers')}: unknown scheduler {s!r}")

    return ResolvedRun(
        model=model,
        task=task,
        run=run,
        pretrain_steps=cfg.get_int("train", "pretrain_steps", 0, minimum=0),
        pretrain_lr=cfg.get_float("train", "pretrain_lr", 1e-3, lo=0.0),
        pretrain_task_seed=cfg.get_int("train", "pretrain_task_seed", task.seed + 1),
        out_dir=cfg.get_str("output", "dir", "out"),
        plots=cfg.get_bool("output", "plots", True),
        sweep_schedulers=scheds,
        sweep_rates=rates,
        sweep_jobs=cfg.get_int("sweep", "jobs", 1, minimum=1),
    )
