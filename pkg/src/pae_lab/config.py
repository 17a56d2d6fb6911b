"""Run configuration: flat dotted-key text files with full-set canonical dumps.

A config file is lines of `key = value` plus comments. Every key has a
default; an empty file is a valid config. Loading rejects unknown keys and
reports every offense at once, and dump(load(dump())) is byte-identical.
"""

import math
from dataclasses import dataclass

from .errors import ConfigError

# registry: (key, default, constraint) in canonical dump order; value types
# are inferred from the defaults
_POS_INT = "positive integer"
_POS_FLOAT = "positive number"
_FRACTION = "fraction in [0, 1]"
_NONNEG_INT = "non-negative integer"
_NONNEG_FLOAT = "non-negative number"

REGISTRY: list[tuple[str, object, str | None]] = [
    ("model.image_size", 64, _POS_INT),
    ("model.patch_size", 8, _POS_INT),
    ("model.enc_dim", 128, _POS_INT),
    ("model.enc_layers", 4, _POS_INT),
    ("model.enc_heads", 4, _POS_INT),
    ("model.lm_dim", 128, _POS_INT),
    ("model.lm_layers", 4, _POS_INT),
    ("model.lm_heads", 4, _POS_INT),
    ("model.context_len", 256, _POS_INT),
    ("model.lora_rank", 8, _NONNEG_INT),
    ("train.weight_decay", 0.01, _FRACTION),
    ("train.log_every", 25, _POS_INT),
    ("train.max_grad_norm", 5.0, _NONNEG_FLOAT),
    ("train.clip.steps", 300, _POS_INT),
    ("train.clip.batch", 32, _POS_INT),
    ("train.clip.lr", 0.001, _POS_FLOAT),
    ("train.clip.temperature", 0.07, _POS_FLOAT),
    ("train.stage1.steps", 700, _POS_INT),
    ("train.stage1.batch", 16, _POS_INT),
    ("train.stage1.lr", 0.002, _POS_FLOAT),
    ("train.stage1.warmup", 50, _NONNEG_INT),
    ("train.stage1.pvp_weight", 0.3, _FRACTION),
    ("train.stage2.steps", 700, _POS_INT),
    ("train.stage2.batch", 16, _POS_INT),
    ("train.stage2.lr", 0.001, _POS_FLOAT),
    ("train.stage2.warmup", 50, _NONNEG_INT),
    ("train.stage2.pvp_weight", 0.3, _FRACTION),
    ("train.stage3.steps", 400, _POS_INT),
    ("train.stage3.batch", 16, _POS_INT),
    ("train.stage3.lr", 0.001, _POS_FLOAT),
    ("train.stage3.warmup", 30, _NONNEG_INT),
    ("train.stage3.pvp_weight", 0.1, _FRACTION),
    ("train.seg.steps", 700, _POS_INT),
    ("train.seg.batch", 16, _POS_INT),
    ("train.seg.lr", 0.002, _POS_FLOAT),
    ("train.seg.warmup", 50, _NONNEG_INT),
    ("train.game.steps", 500, _POS_INT),
    ("train.game.batch", 16, _POS_INT),
    ("train.game.lr", 0.002, _POS_FLOAT),
    ("train.game.warmup", 40, _NONNEG_INT),
    ("data.train_scenes", 64, _POS_INT),
    ("data.train_seed_base", 100, _NONNEG_INT),
    ("data.eval_scenes", 6, _POS_INT),
    ("data.eval_seed_base", 5000, _NONNEG_INT),
    ("data.target_size", 16, _POS_INT),
    ("game.train_episodes", 24, _POS_INT),
    ("game.train_seed_base", 1000, _NONNEG_INT),
    ("game.eval_seed_base", 2000, _NONNEG_INT),
    ("game.eval_rounds", 15, _POS_INT),
    ("eval.seg_items", 100, _POS_INT),
    ("eval.seg_seed_base", 7000, _NONNEG_INT),
    ("eval.chunk", 128, _POS_INT),
]

_DEFAULTS = {key: default for key, default, _ in REGISTRY}
_CONSTRAINTS = {key: constraint for key, _, constraint in REGISTRY}


def _check_constraint(key: str, value) -> str | None:
    kind = _CONSTRAINTS[key]
    if kind == _POS_INT and value <= 0:
        return f"{key}: must be a positive integer, got {value}"
    if kind == _NONNEG_INT and value < 0:
        return f"{key}: must be non-negative, got {value}"
    if kind == _POS_FLOAT and not (value > 0 and math.isfinite(value)):
        return f"{key}: must be a positive finite number, got {value}"
    if kind == _NONNEG_FLOAT and not (value >= 0 and math.isfinite(value)):
        return f"{key}: must be a non-negative finite number, got {value}"
    if kind == _FRACTION and not (0.0 <= value <= 1.0):
        return f"{key}: must lie in [0, 1], got {value}"
    return None


@dataclass
class LabConfig:
    """Validated full key set; construct via load_config or default_config."""

    values: dict

    def __getitem__(self, key: str):
        if key not in self.values:
            raise ConfigError([f"unknown config key {key!r}"])
        return self.values[key]

    def stage_keys(self, name: str) -> dict:
        """All `train.{name}.*` values with the prefix stripped."""
        prefix = f"train.{name}."
        return {k[len(prefix) :]: v for k, v in self.values.items() if k.startswith(prefix)}

    def model_config(self, vocab_size: int):
        from .model import ModelConfig

        v = self.values
        return ModelConfig(
            vocab_size=vocab_size,
            image_size=v["model.image_size"],
            patch_size=v["model.patch_size"],
            enc_dim=v["model.enc_dim"],
            enc_layers=v["model.enc_layers"],
            enc_heads=v["model.enc_heads"],
            lm_dim=v["model.lm_dim"],
            lm_layers=v["model.lm_layers"],
            lm_heads=v["model.lm_heads"],
            context_len=v["model.context_len"],
            lora_rank=v["model.lora_rank"],
        )

    def dump(self) -> str:
        """Canonical text form: registry order, one `key = value` per line."""
        lines = []
        section = None
        for key, _, _ in REGISTRY:
            top = key.split(".", 1)[0]
            if top != section:
                if section is not None:
                    lines.append("")
                lines.append(f"# {top}")
                section = top
            lines.append(f"{key} = {_format_value(self.values[key])}")
        return "\n".join(lines) + "\n"


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def _parse_value(key: str, raw: str, default) -> tuple[object, str | None]:
    if isinstance(default, bool):
        if raw in ("true", "false"):
            return raw == "true", None
        return None, f"{key}: expected true/false, got {raw!r}"
    if isinstance(default, int):
        try:
            return int(raw), None
        except ValueError:
            return None, f"{key}: expected an integer, got {raw!r}"
    if isinstance(default, float):
        try:
            value = float(raw)
        except ValueError:
            return None, f"{key}: expected a number, got {raw!r}"
        if math.isnan(value):
            return None, f"{key}: NaN is not a valid value"
        return value, None
    return raw, None


def _cross_checks(values: dict) -> list[str]:
    errors = []
    if values["model.image_size"] % values["model.patch_size"]:
        errors.append(
            "model.patch_size: image_size "
            f"{values['model.image_size']} is not divisible by patch_size "
            f"{values['model.patch_size']}"
        )
    if values["model.enc_dim"] % values["model.enc_heads"]:
        errors.append("model.enc_heads: enc_dim must be divisible by enc_heads")
    if values["model.lm_dim"] % values["model.lm_heads"]:
        errors.append("model.lm_heads: lm_dim must be divisible by lm_heads")
    if values["model.image_size"] % values["data.target_size"]:
        errors.append(
            "data.target_size: must divide model.image_size "
            f"({values['model.image_size']})"
        )
    for stage in ("clip", "stage1", "stage2", "stage3", "seg", "game"):
        warm_key = f"train.{stage}.warmup"
        if warm_key in values and values[warm_key] >= values[f"train.{stage}.steps"]:
            errors.append(f"{warm_key}: warmup must be smaller than steps")
    return errors


def parse_config_text(text: str) -> LabConfig:
    """Parse `key = value` lines over the defaults; report every offense."""
    values = dict(_DEFAULTS)
    errors = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            errors.append(f"line {lineno}: expected `key = value`, got {stripped!r}")
            continue
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in _DEFAULTS:
            errors.append(f"line {lineno}: unknown config key {key!r}")
            continue
        value, err = _parse_value(key, raw, _DEFAULTS[key])
        if err:
            errors.append(f"line {lineno}: {err}")
            continue
        constraint_err = _check_constraint(key, value)
        if constraint_err:
            errors.append(f"line {lineno}: {constraint_err}")
            continue
        values[key] = value
    if not errors:
        errors.extend(_cross_checks(values))
    if errors:
        raise ConfigError(errors)
    return LabConfig(values)


def load_config(path) -> LabConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config_text(fh.read())


def default_config() -> LabConfig:
    return LabConfig(dict(_DEFAULTS))
