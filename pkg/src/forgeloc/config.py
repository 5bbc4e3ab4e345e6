"""Run configuration: a flat key=value file plus command-line overrides.

Desk-scale defaults train a depth-3, 8-channel model on 64x64 patches;
the reference-scale regime (256x256 patches, depth 5, 3 blocks per scale,
batch 12 for 100 epochs) stays expressible through the same keys.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from pathlib import Path


@dataclass
class TrainConfig:
    image_size: int = 64
    batch_size: int = 12
    epochs: int = 20
    max_steps: int = 0              # 0 = run all epochs
    lr: float = 5e-4
    weight_decay: float = 0.005
    lambda_su: float = 0.1
    lambda_mi: float = 1.0
    lambda_aux: float = 0.1
    mask_noise_gamma: float = 0.05
    noise_within_mask: bool = False
    augment: bool = True                # random flips / 90-degree rotations
    mi_kl_mode: str = "categorical"     # or "gaussian"
    su_aggregate: str = "mean"          # or "max"
    detach_loo: bool = False
    prob_clamp_eps: float = 1e-6
    depth: int = 3
    blocks_per_scale: int = 1
    base_channels: int = 8
    reasoning_depth: int = 1
    seed: int = 0
    threshold: float = 0.5
    checkpoint_every: int = 1           # epochs

    def __post_init__(self):
        for name in ("image_size", "batch_size", "epochs", "lr",
                     "weight_decay", "depth", "blocks_per_scale",
                     "base_channels", "checkpoint_every"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0.0 <= self.mask_noise_gamma <= 1.0:
            raise ValueError("mask_noise_gamma must be in [0,1]")

    @property
    def lambdas(self) -> tuple[float, float, float]:
        return (self.lambda_su, self.lambda_mi, self.lambda_aux)

    def to_snapshot(self) -> str:
        lines = [f"{k} = {v}" for k, v in sorted(asdict(self).items())]
        return "\n".join(lines) + "\n"


_BOOL_STRINGS = {"true": True, "1": True, "yes": True,
                 "false": False, "0": False, "no": False}


def _coerce(raw: str, target_type):
    raw = raw.strip()
    if target_type is bool:
        try:
            return _BOOL_STRINGS[raw.lower()]
        except KeyError:
            raise ValueError(f"cannot read {raw!r} as a boolean") from None
    return target_type(raw)


def parse_config(path=None, overrides=None) -> TrainConfig:
    """Build a TrainConfig from an optional key=value file and a list of
    key=value override strings (later entries win)."""
    types = {f.name: f.type for f in fields(TrainConfig)}
    # dataclass field types arrive as strings under `from __future__ import
    # annotations`; resolve the handful we use
    resolved = {"int": int, "float": float, "str": str, "bool": bool}
    values: dict = {}

    def apply(key: str, raw: str, origin: str):
        if key not in types:
            raise ValueError(f"unknown config key {key!r} ({origin})")
        t = types[key]
        t = resolved.get(t, t) if isinstance(t, str) else t
        values[key] = _coerce(raw, t)

    if path is not None:
        for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key = value")
            key, raw = line.split("=", 1)
            apply(key.strip(), raw, f"{path}:{lineno}")
    for item in overrides or []:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        apply(key.strip(), raw, "--set")
    return TrainConfig(**values)
