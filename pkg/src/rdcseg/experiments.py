"""Desk-scale experiments: regular vs RDC on distorted scenes, and AdaBN isolation."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Dict

import numpy as np

from .config import TrainConfig
from .ops import conv2d
from .runner import DomainData, build_trainer, evaluate, to_input, train, warp_pair
from .synth import SceneSpec, generate_scene
from .training import domain_forward, offset_magnitude


@dataclass
class DistortionResult:
    miou: Dict[str, float]
    offset_magnitude: float
    seconds: float


def distorted_scenes(count, spec: SceneSpec, target_shape, focal_range, seed):
    """Scenes warped once each with a uniformly drawn focal length."""
    rng = np.random.default_rng(seed)
    scene_rng = np.random.default_rng(spec.seed)
    images, labels = [], []
    for _ in range(count):
        img, lab = generate_scene(spec, scene_rng)
        img, lab = warp_pair(img, lab, rng.uniform(*focal_range), target_shape)
        images.append(img)
        labels.append(lab)
    return images, labels


def distortion_experiment(scenes=500, val=100, iters=2000, seed=0, target_shape=(48, 48),
                          source_shape=(64, 128), focal_range=(25.0, 100.0), channels=16,
                          batch=8, variants=("regular", "RDC")) -> DistortionResult:
    """Train matched toy nets that differ only in the block variant of the last two blocks.

    The focal range is the 200-800 px range scaled by source height / 512.
    """
    t0 = time.perf_counter()
    spec = SceneSpec(*source_shape, num_classes=4, seed=seed)
    images, labels = distorted_scenes(scenes, spec, target_shape, focal_range, seed + 1)
    train_set = DomainData(images[:-val], labels[:-val])
    val_imgs, val_labs = images[-val:], labels[-val:]
    miou = {}
    mag = 0.0
    for variant in variants:
        v = variant if variant == "regular" else variant.lower()
        cfg = TrainConfig(max_iter=iters, K=0, alpha=0.0, beta=0.0, gamma=0.3, batch_per_domain=batch,
                          blocks=f"down:{channels},nb:regular:1,nb:{v}:2,nb:{v}:4", aux_channels=32,
                          zoom_mode="none", seed=seed, weight_decay=2e-4).validate()
        trainer = train(cfg, [train_set])
        cm = evaluate(trainer.net, trainer.bank, val_imgs, val_labs, 0, cfg.num_classes)
        miou[variant] = cm.mean_iou()
        if variant != "regular":
            # offsets of the last forward on the validation set
            x = val_imgs[:16]
            domain_forward(trainer.net, to_input(x), 0, trainer.bank, "inference")
            mag = offset_magnitude(trainer.net)
    return DistortionResult(miou, mag, time.perf_counter() - t0)


@dataclass
class AdaBNResult:
    unused_unchanged: bool
    measured_shift: np.ndarray
    expected_shift: np.ndarray

    @property
    def relative_error(self) -> float:
        return float(np.linalg.norm(self.measured_shift - self.expected_shift) / np.linalg.norm(self.expected_shift))


class _GaussianDomain:
    """Pixels ~ N(shift, 1) per channel; label = whether channel 0 exceeds its domain mean."""

    def __init__(self, shift, shape=(16, 16), channels=3):
        self.shift = np.asarray(shift, dtype=np.float64)
        self.shape, self.channels = shape, channels

    def batch(self, n, rng):
        x = rng.normal(size=(n, self.channels) + self.shape) + self.shift[None, :, None, None]
        labels = (x[:, 0] > self.shift[0]).astype(np.int64)
        return x, labels


def adabn_experiment(iters=500, shift=(2.0, -1.0, 0.5), seed=0) -> AdaBNResult:
    """Two active domains differing by a constant input shift, plus one idle registered domain."""
    cfg = TrainConfig(max_iter=iters, K=1, alpha=0.5, beta=0.5, gamma=0.3, batch_per_domain=4,
                      blocks="down:8,nb:regular:1", num_classes=2, aux_channels=8, zoom_mode="none",
                      seed=seed).validate()
    trainer = build_trainer(cfg, extra_domains=(2,))
    before = trainer.bank.snapshot(2)
    domains = [_GaussianDomain(np.zeros(3)), _GaussianDomain(shift)]
    train(cfg, domains, trainer=trainer)
    after = trainer.bank.snapshot(2)
    unchanged = all(np.array_equal(before[k][0], after[k][0]) and np.array_equal(before[k][1], after[k][1])
                    for k in before) and before.keys() == after.keys()
    first = trainer.net.norm_layers()[0].name
    conv = trainer.net.encoder.layers[0].layers[0]
    measured = trainer.bank.get(1)[first].mean - trainer.bank.get(0)[first].mean
    # shift propagated through the (linear, zero-padded) first convolution
    field = np.broadcast_to(np.asarray(shift)[None, :, None, None], (1, 3) + domains[0].shape)
    expected = conv2d(field, conv.weight.data, None, conv.stride, conv.dilation, conv.padding).mean(axis=(0, 2, 3))
    return AdaBNResult(unchanged, measured, expected)
