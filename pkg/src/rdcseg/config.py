"""Line-oriented ``key=value`` training configuration.

Blank lines and ``#`` comments are ignored. Keys:

    max_iter                 iterations to run (poly schedule horizon)
    base_lr                  initial learning rate
    power                    poly exponent
    momentum                 Nesterov momentum
    weight_decay             L2 coefficient on convolution weights
    batch_per_domain         images drawn from each domain per iteration
    loss_scale               multiplier on every softmax loss
    bn_momentum              running-statistics momentum
    offset_freeze_iters      iterations with offset layers frozen (default 20/120 of max_iter)
    offset_lr_mult_encoder   offset learning-rate multiplier, encoder phase
    offset_lr_mult_joint     offset learning-rate multiplier, joint phase
    phase                    encoder | joint
    alpha, beta, gamma       hybrid loss weightings
    K                        number of transformed domains (0 = single-domain baseline)
    blocks                   e.g. down:16,nb:regular:1,nb:rdc:2
    in_channels              input channels
    num_classes              classes per label space
    aux_channels             auxiliary trunk width
    seed                     initialization and sampling seed
    zoom_mode                none | fixed | random (online warp of domains 1..K)
    focal                    fixed-mode focal length in pixels
    focal_min, focal_max     random-mode focal range in pixels
    warp_height, warp_width  online warp output extents
    log_every                CSV log period in iterations
"""

from __future__ import annotations

from dataclasses import dataclass, fields

from .nn import ToyNetConfig
from .training import LossWeights, Schedule


class ConfigError(ValueError):
    def __init__(self, key, message):
        super().__init__(f"config key {key!r}: {message}")
        self.key = key


@dataclass
class TrainConfig:
    max_iter: int = 50
    base_lr: float = 0.05
    power: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 2e-4
    batch_per_domain: int = 4
    loss_scale: float = 2.0
    bn_momentum: float = 0.9
    offset_freeze_iters: int = -1
    offset_lr_mult_encoder: float = 1.0
    offset_lr_mult_joint: float = 0.1
    phase: str = "encoder"
    alpha: float = 1 / 3
    beta: float = 1 / 2
    gamma: float = 0.3
    K: int = 2
    blocks: str = "down:16,nb:regular:1,nb:rdc:2"
    in_channels: int = 3
    num_classes: int = 4
    aux_channels: int = 128
    seed: int = 0
    zoom_mode: str = "random"
    focal: float = 40.0
    focal_min: float = 25.0
    focal_max: float = 100.0
    warp_height: int = 48
    warp_width: int = 48
    log_every: int = 1

    def schedule(self) -> Schedule:
        return Schedule(
            base_lr=self.base_lr, power=self.power, max_iter=self.max_iter,
            offset_freeze_iters=None if self.offset_freeze_iters < 0 else self.offset_freeze_iters,
            offset_lr_mult_encoder=self.offset_lr_mult_encoder, offset_lr_mult_joint=self.offset_lr_mult_joint,
            phase=self.phase, momentum=self.momentum, weight_decay=self.weight_decay,
            batch_per_domain=self.batch_per_domain, loss_scale=self.loss_scale, bn_momentum=self.bn_momentum,
        )

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta, self.gamma, self.K)

    def net_config(self) -> ToyNetConfig:
        return ToyNetConfig(ToyNetConfig.parse_blocks(self.blocks), self.in_channels, self.num_classes,
                            tuple(range(self.K + 1)), self.aux_channels, self.seed)

    def validate(self):
        checks = [
            ("schedule", self.schedule),
            ("loss weights", self.loss_weights),
        ]
        for what, make in checks:
            try:
                make()
            except ValueError as exc:
                raise ConfigError(_guess_key(str(exc)), str(exc)) from None
        try:
            self.net_config().validate()
        except ValueError as exc:
            raise ConfigError("blocks", str(exc)) from None
        if self.zoom_mode not in ("none", "fixed", "random"):
            raise ConfigError("zoom_mode", f"expected none|fixed|random, got {self.zoom_mode!r}")
        if self.zoom_mode == "fixed" and self.focal <= 0:
            raise ConfigError("focal", "must be positive")
        if self.zoom_mode == "random" and not 0 < self.focal_min <= self.focal_max:
            raise ConfigError("focal_min", "need 0 < focal_min <= focal_max")
        if self.log_every < 1:
            raise ConfigError("log_every", "must be positive")
        return self

    def dumps(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)!r}\n".replace("'", "") for f in fields(self))


def _guess_key(message: str) -> str:
    for f in fields(TrainConfig):
        if message.startswith(f.name + " ") or message.startswith(f.name + ":"):
            return f.name
    return message.split(" ", 1)[0]


def parse_config(text: str) -> TrainConfig:
    cfg = TrainConfig()
    types = {f.name: f.type for f in fields(TrainConfig)}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(line, f"line {lineno} is not key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(key, f"unknown key on line {lineno}")
        kind = types[key]
        try:
            if kind == "int":
                parsed = int(value)
            elif kind == "float":
                parsed = float(_fraction(value))
            else:
                parsed = value
        except ValueError:
            raise ConfigError(key, f"cannot parse {value!r} as {kind}") from None
        setattr(cfg, key, parsed)
    return cfg.validate()


def _fraction(value: str) -> float:
    if "/" in value:
        num, den = value.split("/", 1)
        return float(num) / float(den)
    return float(value)


def load_config(path) -> TrainConfig:
    with open(path) as fh:
        return parse_config(fh.read())
