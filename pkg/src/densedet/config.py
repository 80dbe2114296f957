"""Run configuration: one flat dataclass, key=value files, CLI overrides.

Config files are plain text, one ``key = value`` pair per line, ``#`` for
comments.  Any key can also be overridden on the command line as
``--key value``.  Values are coerced to the dataclass field type; unknown
keys and uncoercible values are hard errors, never warnings.

``DSL_SEED`` in the environment supplies the seed when the config leaves it
unset (seed < 0).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from pathlib import Path

SEED_ENV_VAR = "DSL_SEED"


class ConfigError(ValueError):
    pass


@dataclasses.dataclass
class TrainConfig:
    # data
    data_dir: str = ""
    eval_dir: str = ""
    labeled_fraction: float = 0.05
    split_seed: int = 7
    # schedule
    total_steps: int = 1200
    burnin_steps: int = -1          # -1: use burnin_fraction
    burnin_fraction: float = 0.25
    batch_labeled: int = 2
    batch_unlabeled: int = 2
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-4
    lr_decay: float = 0.1
    milestone_fracs: tuple = (16 / 24, 22 / 24)
    # semi-supervised weights
    alpha: float = 3.0
    scale_weight: float = 1.0
    # pseudo-label filtering
    tau1: float = 0.1
    tau: float = 0.35
    beta: float = 0.7
    tau2_min: float = 0.25
    tau2_max: float = 0.35
    single_thresh: float = 0.2      # used when adaptive filtering is off
    # teacher
    ema_epsilon: float = 0.99
    teacher_score_thresh: float = 0.05
    nms_iou: float = 0.5
    max_dets: int = 50
    # proxy refinement
    metanet_gate: float = 0.6
    metanet_steps: int = 300
    metanet_lr: float = 0.01
    # augmentation
    jitter: float = 0.25
    max_cutouts: int = 2
    shuffle_iters: int = 2
    downsample: int = 2
    # toggles
    use_adaptive: bool = True
    use_metanet: bool = True
    use_ema_teacher: bool = True
    use_rla: bool = True
    use_patch_shuffle: bool = True
    use_scale_loss: bool = True
    # bookkeeping
    seed: int = -1                  # -1: take DSL_SEED from the environment, else 0
    eval_every: int = 0             # 0: only at the end
    checkpoint_every: int = 0       # 0: only at the end
    log_every: int = 1

    def resolved_seed(self):
        if self.seed >= 0:
            return int(self.seed)
        env = os.environ.get(SEED_ENV_VAR)
        if env is not None:
            try:
                return int(env)
            except ValueError:
                raise ConfigError(f"{SEED_ENV_VAR}={env!r} is not an integer") from None
        return 0

    def burnin(self):
        if self.burnin_steps >= 0:
            return min(self.burnin_steps, self.total_steps)
        return int(self.total_steps * self.burnin_fraction)

    def validate(self):
        if self.total_steps < 1:
            raise ConfigError(f"total_steps must be positive, got {self.total_steps}")
        if not (0 < self.labeled_fraction <= 1):
            raise ConfigError(f"labeled_fraction must lie in (0,1], got {self.labeled_fraction}")
        if self.alpha < 0 or self.scale_weight < 0:
            raise ConfigError("loss weights must be non-negative")
        if not (0 <= self.tau1 <= 1 and 0 < self.tau <= 1):
            raise ConfigError(f"bad thresholds tau1={self.tau1} tau={self.tau}")
        if not (0 < self.tau2_min <= self.tau2_max <= 1):
            raise ConfigError(f"bad clamp window [{self.tau2_min}, {self.tau2_max}]")
        if self.tau1 > self.tau2_min:
            raise ConfigError(f"tau1={self.tau1} above the clamp floor {self.tau2_min} "
                              "inverts the ignorable band")
        if not (0 <= self.ema_epsilon < 1):
            raise ConfigError(f"ema_epsilon must lie in [0,1), got {self.ema_epsilon}")
        if self.batch_labeled < 1 or self.batch_unlabeled < 1:
            raise ConfigError("batch sizes must be at least 1")
        if self.downsample < 2:
            raise ConfigError(f"downsample factor must be >= 2, got {self.downsample}")
        for f in self.milestone_fracs:
            if not (0 < f <= 1):
                raise ConfigError(f"milestone fraction {f} outside (0, 1]")
        return self


_FIELDS = {f.name: f for f in dataclasses.fields(TrainConfig)}


def _coerce(name, raw):
    f = _FIELDS[name]
    raw = raw.strip()
    if f.type in ("bool", bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{name}: expected a boolean, got {raw!r}")
    if f.type in ("int", int):
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"{name}: expected an integer, got {raw!r}") from None
    if f.type in ("float", float):
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{name}: expected a number, got {raw!r}") from None
    if f.type in ("tuple", tuple):
        try:
            return tuple(float(v) for v in raw.replace(",", " ").split())
        except ValueError:
            raise ConfigError(f"{name}: expected comma-separated numbers, got {raw!r}") from None
    return raw


def load_config(path=None, overrides=None):
    """Build a TrainConfig from an optional file plus --key value overrides."""
    values = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {p} does not exist")
        for ln, line in enumerate(p.read_text().splitlines(), start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"{p}:{ln}: expected 'key = value', got {line!r}")
            key, raw = (s.strip() for s in line.split("=", 1))
            if key not in _FIELDS:
                raise ConfigError(f"{p}:{ln}: unknown config key {key!r}")
            values[key] = _coerce(key, raw)
    for key, raw in (overrides or {}).items():
        key = key.replace("-", "_")
        if key not in _FIELDS:
            raise ConfigError(f"unknown config key --{key}")
        values[key] = _coerce(key, raw) if isinstance(raw, str) else raw
    return TrainConfig(**values).validate()


def dump_config(cfg: TrainConfig):
    lines = []
    for f in dataclasses.fields(cfg):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ", ".join(repr(x) for x in v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def code_fingerprint():
    """Content hash of the installed package sources (run provenance)."""
    root = Path(__file__).parent
    h = hashlib.sha256()
    for path in sorted(root.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return h.hexdigest()[:16]


def write_run_manifest(run_dir, cfg: TrainConfig, kind, extra=None):
    """Snapshot everything needed to reproduce a run into run_dir/manifest.json."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    doc = {
        "kind": kind,
        "seed": cfg.resolved_seed(),
        "code": code_fingerprint(),
        "config": dataclasses.asdict(cfg),
    }
    if extra:
        doc.update(extra)
    path = run_dir / "manifest.json"
    path.write_text(json.dumps(doc, indent=1, sort_keys=True, default=list))
    (run_dir / "config.txt").write_text(dump_config(cfg))
    return doc
