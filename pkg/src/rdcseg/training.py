"""Multi-task training: hybrid loss weightings, per-domain norm statistics,
poly schedule, Nesterov updates and the offset warm-up rules."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .nn import Context, ToyNet
from .ops import NormStatistics, softmax_cross_entropy

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1 / 3
    beta: float = 1 / 2
    gamma: float = 0.3
    K: int = 2

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must lie in [0, 1], got {self.beta}")
        if self.gamma < 0:
            raise ValueError(f"gamma must be nonnegative, got {self.gamma}")
        if self.K < 0 or int(self.K) != self.K:
            raise ValueError(f"K must be a nonnegative integer, got {self.K}")

    def coefficients(self) -> Tuple[List[float], List[float]]:
        """Per-task multipliers of the main and auxiliary losses in the total.

        With K = 0 (single-domain baseline) the transformed-domain terms
        vanish and the real-domain losses enter with weight 1 and gamma.
        """
        if self.K == 0:
            return [1], [self.gamma]
        main = [1 - self.alpha] + [self.alpha / self.K] * self.K
        aux = [self.gamma * (1 - self.beta)] + [self.gamma * self.beta / self.K] * self.K
        return main, aux


def hlw_total_loss(main_losses: Sequence[float], aux_losses: Sequence[float], weights: LossWeights) -> float:
    """Hybrid weighted total. Works on any number type, so Fraction inputs stay exact."""
    k = weights.K
    if len(main_losses) != k + 1 or len(aux_losses) != k + 1:
        raise ValueError(f"expected K+1={k + 1} main and auxiliary losses, got "
                         f"{len(main_losses)} and {len(aux_losses)}")
    if k == 0:
        return main_losses[0] + weights.gamma * aux_losses[0]
    l_main = (1 - weights.alpha) * main_losses[0] + weights.alpha / k * sum(main_losses[1:])
    l_aux = (1 - weights.beta) * aux_losses[0] + weights.beta / k * sum(aux_losses[1:])
    return l_main + weights.gamma * l_aux


@dataclass
class Schedule:
    base_lr: float = 0.05
    power: float = 0.9
    max_iter: int = 1000
    offset_freeze_iters: Optional[int] = None  # None -> 20/120 of max_iter
    offset_lr_mult_encoder: float = 1.0
    offset_lr_mult_joint: float = 0.1
    phase: str = "encoder"
    momentum: float = 0.9
    weight_decay: float = 2e-4
    batch_per_domain: int = 4
    loss_scale: float = 2.0
    bn_momentum: float = 0.9

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ValueError(f"base_lr must be positive, got {self.base_lr}")
        if self.power <= 0:
            raise ValueError(f"power must be positive, got {self.power}")
        if self.max_iter <= 0:
            raise ValueError(f"max_iter must be positive, got {self.max_iter}")
        if self.phase not in ("encoder", "joint"):
            raise ValueError(f"phase must be 'encoder' or 'joint', got {self.phase!r}")
        if self.batch_per_domain < 1:
            raise ValueError("batch_per_domain must be positive")

    @property
    def freeze_iters(self) -> int:
        if self.offset_freeze_iters is None:
            return int(round(self.max_iter * 20 / 120))
        return int(self.offset_freeze_iters)

    def offset_multiplier(self, it: int) -> float:
        if it < self.freeze_iters:
            return 0.0
        return self.offset_lr_mult_encoder if self.phase == "encoder" else self.offset_lr_mult_joint


def poly_lr(it: int, schedule: Schedule) -> float:
    if it < 0:
        raise ValueError(f"iteration must be nonnegative, got {it}")
    if it >= schedule.max_iter:
        return 0.0
    return schedule.base_lr * (1.0 - it / schedule.max_iter) ** schedule.power


def nag_step(param, grad, velocity, lr, momentum, weight_decay, lr_multiplier=1.0):
    """One Nesterov step; returns the new ``(param, velocity)``."""
    param = np.asarray(param)
    if np.shape(grad) != param.shape or np.shape(velocity) != param.shape:
        raise ValueError(f"shape mismatch: param {param.shape}, grad {np.shape(grad)}, "
                         f"velocity {np.shape(velocity)}")
    step = lr * lr_multiplier
    g = grad + weight_decay * param
    v = momentum * velocity - step * g
    return param + momentum * v - step * g, v


class DomainNormBank:
    """Private running statistics per domain, one entry per norm layer."""

    def __init__(self):
        self._stats: Dict[int, Dict[str, NormStatistics]] = {}

    def register(self, domain: int, layers: Iterable[Tuple[str, int]]):
        self._stats[domain] = {name: NormStatistics.fresh(ch) for name, ch in layers}

    def register_net(self, domain: int, net: ToyNet):
        self.register(domain, [(n.name, n.channels) for n in net.norm_layers()])

    def __contains__(self, domain):
        return domain in self._stats

    @property
    def domains(self) -> List[int]:
        return sorted(self._stats)

    def get(self, domain: int) -> Dict[str, NormStatistics]:
        if domain not in self._stats:
            raise KeyError(f"domain {domain!r} is not registered")
        return self._stats[domain]

    def snapshot(self, domain: int) -> Dict[str, Tuple[np.ndarray, np.ndarray]]:
        return {k: (s.mean.copy(), s.var.copy()) for k, s in self.get(domain).items()}

    def save(self, path, domain: int):
        """One text line per layer and moment; values as exact float hex."""
        with open(path, "w") as fh:
            for name, s in sorted(self.get(domain).items()):
                for tag, arr in (("mean", s.mean), ("var", s.var)):
                    fh.write(f"{name}\t{tag}\t{','.join(float(v).hex() for v in arr)}\n")

    def load(self, path, domain: int):
        stats: Dict[str, NormStatistics] = {}
        with open(path) as fh:
            for line in fh:
                name, tag, vals = line.rstrip("\n").split("\t")
                arr = np.array([float.fromhex(v) for v in vals.split(",")])
                s = stats.setdefault(name, NormStatistics(np.zeros_like(arr), np.ones_like(arr)))
                setattr(s, tag, arr)
        self._stats[domain] = stats


def domain_forward(net: ToyNet, x, domain: int, bank: DomainNormBank, mode="train", momentum=0.9):
    """Run the shared network with ``domain``'s private statistics.

    Returns ``(logits, aux_logits, cache)``.
    """
    if domain not in bank:
        raise KeyError(f"domain {domain!r} is not registered in the norm bank")
    return net.forward(x, domain, Context(bank.get(domain), mode, momentum))


@dataclass
class StepResult:
    lr: float
    main: List[float]
    aux: List[float]
    total: float


@dataclass
class Trainer:
    """Owns the network, the norm bank and the optimizer state.

    ``task_domains`` lists the domain ids in loss order: index 0 is the real
    domain, the rest are the K transformed domains.
    """

    net: ToyNet
    bank: DomainNormBank
    weights: LossWeights
    schedule: Schedule
    task_domains: Tuple[int, ...] = (0,)
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.task_domains) != self.weights.K + 1:
            raise ValueError(f"{len(self.task_domains)} task domains for K={self.weights.K}")
        for d in self.task_domains:
            if d not in self.bank:
                self.bank.register_net(d, self.net)
        for p in self.net.parameters():
            self.velocity.setdefault(p.name, np.zeros_like(p.data))

    def compute_gradients(self, batches: Mapping[int, Tuple[np.ndarray, np.ndarray]]):
        """Forward every task, backpropagate the weighted total once per branch.

        Returns ``(main_losses, aux_losses, total)``; parameter ``.grad``
        buffers hold the gradient of the total.
        """
        missing = [d for d in self.task_domains if d not in batches]
        if missing:
            raise ValueError(f"missing batch for domain(s) {missing}")
        c_main, c_aux = self.weights.coefficients()
        self.net.zero_grad()
        main, aux = [], []
        scale = self.schedule.loss_scale
        for i, d in enumerate(self.task_domains):
            x, labels = batches[d]
            logits, aux_logits, cache = domain_forward(self.net, x, d, self.bank, "train",
                                                       self.schedule.bn_momentum)
            lm, gm = softmax_cross_entropy(logits, labels, loss_scale=scale)
            la, ga = softmax_cross_entropy(aux_logits, labels, loss_scale=scale)
            main.append(lm)
            aux.append(la)
            # zero-weight branches are skipped so collapsed configurations match exactly
            self.net.backward(cache,
                              gm * c_main[i] if c_main[i] else None,
                              ga * c_aux[i] if c_aux[i] else None)
        return main, aux, hlw_total_loss(main, aux, self.weights)

    def apply_update(self, it: int) -> float:
        lr = poly_lr(it, self.schedule)
        s = self.schedule
        off_mult = s.offset_multiplier(it)
        for p in self.net.parameters():
            mult = off_mult if p.tags.get("offset") else 1.0
            wd = s.weight_decay if p.tags.get("decay") else 0.0
            p.data, self.velocity[p.name] = nag_step(p.data, p.grad, self.velocity[p.name], lr,
                                                     s.momentum, wd, mult)
        return lr

    def train_step(self, batches, it: int) -> StepResult:
        main, aux, total = self.compute_gradients(batches)
        lr = self.apply_update(it)
        return StepResult(lr, main, aux, total)


def offset_magnitude(net: ToyNet) -> float:
    """Mean absolute offset over every deformable layer's most recent forward."""
    vals = [np.abs(layer.last_offsets).mean() for layer in net.deform_layers() if layer.last_offsets is not None]
    return float(np.mean(vals)) if vals else 0.0


def predict(net: ToyNet, bank: DomainNormBank, x, domain: int, batch: int = 16) -> np.ndarray:
    out = []
    for i in range(0, x.shape[0], batch):
        logits, _, _ = domain_forward(net, x[i:i + batch], domain, bank, "inference")
        out.append(logits.argmax(axis=1))
    return np.concatenate(out)
