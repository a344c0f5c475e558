"""
Run configuration
Flat `key = value` text with `#` comments; `--set key=value` flags override the file
"""

import logging
import math
from dataclasses import dataclass, fields, replace
from typing import Any, Callable, Dict, List, Optional, Sequence, Tuple

from ..core.exceptions import ConfigError
from ..core.models import AttackConfig, AttackInit
from ..services.zoo_service import MemberSpec, parse_pool_spec

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class RunConfig:
    """Every experiment knob; defaults are the desk-scale settings"""
    # attack
    epsilon: float = 20.0
    theta: float = 10.0
    batch: int = 5
    epochs: int = 10
    n_images: int = 600
    lambda_patch: float = 0.5
    patch_mask_prob: float = 0.3
    attn_drop_prob: float = 0.5
    init: str = "zeros"
    attack_seed: int = 0
    # data
    num_classes: int = 6
    per_class_train: int = 100
    per_class_test: int = 50
    image_size: int = 64
    data_seed: int = 7
    # pool and training
    pool: str = "default@11,default@12,deep@13,wide@14"
    source_index: int = 0
    model_epochs: int = 20
    model_lr: float = 0.001
    model_batch: int = 32
    probe_epochs: int = 200
    probe_lr: float = 0.01
    admission_threshold: float = 0.85
    # per-image / per-class attacks
    psap_steps: int = 100
    psap_samples: int = 100
    csap_class: int = 0
    switch_period: int = 8
    # sweeps and diagnostics
    sweep_thetas: Tuple[float, ...] = (1.0, 5.0, 10.0, 20.0, 50.0)
    sweep_epsilons: Tuple[float, ...] = (5.0, 10.0, 20.0, 40.0)
    ablate_sizes: Tuple[int, ...] = (60, 150, 300, 600)
    pool_sizes: Tuple[int, ...] = (1, 2, 3)
    histogram_bins: int = 41
    heatmap_images: int = 4
    pca_images: int = 120
    ood_palette_shift: float = 40.0
    # run
    output_dir: str = "runs"
    experiment: str = "all"

    def attack_config(self, **overrides) -> AttackConfig:
        values = dict(epsilon=self.epsilon, theta=self.theta, batch=self.batch, epochs=self.epochs,
                      n_images=self.n_images, lambda_patch=self.lambda_patch,
                      patch_mask_prob=self.patch_mask_prob, attn_drop_prob=self.attn_drop_prob,
                      seed=self.attack_seed, init=AttackInit(self.init), psap_steps=self.psap_steps)
        values.update(overrides)
        return AttackConfig(**values)

    def pool_specs(self) -> List[MemberSpec]:
        return parse_pool_spec(self.pool, self.image_size, self.num_classes)

    def to_text(self) -> str:
        """Resolved config, one `key = value` line per field in declaration order."""
        lines = []
        for f in fields(self):
            value = getattr(self, f.name)
            if isinstance(value, tuple):
                value = ",".join(_format_scalar(v) for v in value)
            else:
                value = _format_scalar(value)
            lines.append(f"{f.name} = {value}")
        return "\n".join(lines) + "\n"


def _format_scalar(value: Any) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_int(raw: str) -> int:
    text = raw.strip()
    if not text.lstrip("+-").isdigit():
        raise ValueError(f"'{raw}' is not an integer")
    return int(text)


def _parse_float(raw: str) -> float:
    value = float(raw)
    if not math.isfinite(value):
        raise ValueError(f"'{raw}' is not a finite number")
    return value


def _parse_list(item: Callable[[str], Any]) -> Callable[[str], Tuple]:
    def parse(raw: str) -> Tuple:
        parts = [p for p in (s.strip() for s in raw.split(",")) if p]
        if not parts:
            raise ValueError("empty list")
        return tuple(item(p) for p in parts)
    return parse


_PARSERS: Dict[type, Callable[[str], Any]] = {
    int: _parse_int,
    float: _parse_float,
    str: lambda raw: raw.strip(),
}
_LIST_PARSERS = {
    "sweep_thetas": _parse_list(_parse_float),
    "sweep_epsilons": _parse_list(_parse_float),
    "ablate_sizes": _parse_list(_parse_int),
    "pool_sizes": _parse_list(_parse_int),
}


def _field_parser(name: str) -> Callable[[str], Any]:
    if name in _LIST_PARSERS:
        return _LIST_PARSERS[name]
    default = getattr(RunConfig(), name)
    return _PARSERS[type(default)]


def _positive(v) -> bool:
    return v > 0


def _non_negative(v) -> bool:
    return v >= 0


def _probability(v) -> bool:
    return 0.0 <= v <= 1.0


def _at_least(n):
    return lambda v: v >= n


_FIELD_RULES: Dict[str, Tuple[Callable[[Any], bool], str]] = {
    "epsilon": (_positive, "must be > 0"),
    "theta": (_positive, "must be > 0"),
    "batch": (_at_least(1), "must be >= 1"),
    "epochs": (_at_least(1), "must be >= 1"),
    "n_images": (_at_least(1), "must be >= 1"),
    "lambda_patch": (_non_negative, "must be >= 0"),
    "patch_mask_prob": (_probability, "must lie in [0, 1]"),
    "attn_drop_prob": (_probability, "must lie in [0, 1]"),
    "init": (lambda v: v in {i.value for i in AttackInit}, "must be 'zeros' or 'uniform'"),
    "attack_seed": (_non_negative, "must be >= 0"),
    "num_classes": (_at_least(2), "must be >= 2"),
    "per_class_train": (_at_least(1), "must be >= 1"),
    "per_class_test": (_at_least(1), "must be >= 1"),
    "image_size": (_at_least(1), "must be >= 1"),
    "data_seed": (_non_negative, "must be >= 0"),
    "source_index": (_non_negative, "must be >= 0"),
    "model_epochs": (_non_negative, "must be >= 0"),
    "model_lr": (_positive, "must be > 0"),
    "model_batch": (_at_least(1), "must be >= 1"),
    "probe_epochs": (_non_negative, "must be >= 0"),
    "probe_lr": (_positive, "must be > 0"),
    "admission_threshold": (_probability, "must lie in [0, 1]"),
    "psap_steps": (_non_negative, "must be >= 0"),
    "psap_samples": (_at_least(1), "must be >= 1"),
    "csap_class": (_non_negative, "must be >= 0"),
    "switch_period": (_at_least(1), "must be >= 1"),
    "sweep_thetas": (lambda v: all(x > 0 for x in v), "entries must be > 0"),
    "sweep_epsilons": (lambda v: all(x > 0 for x in v), "entries must be > 0"),
    "ablate_sizes": (lambda v: all(x >= 1 for x in v), "entries must be >= 1"),
    "pool_sizes": (lambda v: all(x >= 1 for x in v), "entries must be >= 1"),
    "histogram_bins": (_at_least(2), "must be >= 2"),
    "heatmap_images": (_at_least(1), "must be >= 1"),
    "pca_images": (_at_least(3), "must be >= 3"),
    "output_dir": (lambda v: bool(v), "must not be empty"),
    "experiment": (lambda v: bool(v), "must not be empty"),
}


def _assign(values: Dict[str, Any], lines: Dict[str, Optional[int]], key: str, raw: str,
            line: Optional[int], origin: str) -> None:
    known = {f.name for f in fields(RunConfig)}
    if key not in known:
        raise ConfigError(f"unknown key '{key}' ({origin})", line)
    try:
        value = _field_parser(key)(raw)
    except ValueError as e:
        raise ConfigError(f"cannot parse {key} = '{raw.strip()}' ({origin}): {e}", line) from None
    rule, message = _FIELD_RULES.get(key, (lambda v: True, ""))
    if not rule(value):
        raise ConfigError(f"{key} = {raw.strip()} {message} ({origin})", line)
    values[key] = value
    lines[key] = line


def _split_assignment(text: str) -> Tuple[str, str]:
    key, sep, raw = text.partition("=")
    if not sep or not key.strip():
        raise ValueError(f"expected 'key = value', got '{text.strip()}'")
    return key.strip(), raw


def _cross_check(cfg: RunConfig, lines: Dict[str, Optional[int]]) -> None:
    train_total = cfg.num_classes * cfg.per_class_train
    if cfg.n_images < cfg.batch:
        raise ConfigError(f"n_images ({cfg.n_images}) must be >= batch ({cfg.batch})", lines.get("n_images"))
    if cfg.n_images > train_total:
        raise ConfigError(f"n_images ({cfg.n_images}) exceeds the {train_total} training images",
                          lines.get("n_images"))
    if cfg.csap_class >= cfg.num_classes:
        raise ConfigError(f"csap_class {cfg.csap_class} outside 0..{cfg.num_classes - 1}", lines.get("csap_class"))
    bad_sizes = [s for s in cfg.ablate_sizes if s < cfg.batch or s > train_total]
    if bad_sizes:
        raise ConfigError(f"ablate_sizes {bad_sizes} must lie in [batch, {train_total}]", lines.get("ablate_sizes"))
    try:
        specs = cfg.pool_specs()
    except ConfigError as e:
        raise ConfigError(str(e), lines.get("pool")) from None
    except ValueError as e:
        raise ConfigError(str(e), lines.get("pool")) from None
    if cfg.source_index >= len(specs):
        raise ConfigError(f"source_index {cfg.source_index} outside pool of {len(specs)}", lines.get("source_index"))
    if any(k > len(specs) for k in cfg.pool_sizes):
        raise ConfigError(f"pool_sizes {list(cfg.pool_sizes)} exceed pool of {len(specs)}", lines.get("pool_sizes"))
    try:
        cfg.attack_config().validate()
    except ConfigError as e:
        raise ConfigError(str(e)) from None


def parse_config(text: str, overrides: Sequence[str] = (), base: Optional[RunConfig] = None) -> RunConfig:
    """
    Typed, validated RunConfig.

    Precedence: `base` (built-in defaults when omitted) < file lines < overrides.
    Errors name the offending line; override errors name the flag.
    """
    values: Dict[str, Any] = {}
    lines: Dict[str, Optional[int]] = {}
    for number, raw_line in enumerate(text.splitlines(), start=1):
        content = raw_line.split("#", 1)[0].strip()
        if not content:
            continue
        try:
            key, raw = _split_assignment(content)
        except ValueError as e:
            raise ConfigError(str(e), number) from None
        _assign(values, lines, key, raw, number, "config file")

    for flag in overrides:
        try:
            key, raw = _split_assignment(flag)
        except ValueError as e:
            raise ConfigError(f"--set {flag}: {e}") from None
        _assign(values, lines, key, raw, None, f"--set {flag}")

    cfg = replace(base or RunConfig(), **values)
    _cross_check(cfg, lines)
    logger.debug(f"Resolved config with {len(values)} explicit keys")
    return cfg
