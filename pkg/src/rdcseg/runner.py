"""File-level workflows behind the command line: warping, training, evaluation."""

from __future__ import annotations

import csv
import logging
import os
from typing import Dict, List, Optional, Sequence

import numpy as np

from .config import TrainConfig
from .fisheye import ProjectionParams, RemapGrid, VOID, ZoomAugmentConfig, build_remap_grid, sample_focal, \
    warp_image, warp_labels
from .metrics import ConfusionMatrix
from .netpbm import read_netpbm, write_pgm, write_ppm
from .nn import ToyNet
from .synth import list_pairs, load_pairs, pair_paths
from .tensor import load_checkpoint, save_checkpoint
from .training import DomainNormBank, Trainer, predict

log = logging.getLogger(__name__)

IMAGE_MEAN = 0.5
IMAGE_STD = 0.25


def to_input(images: Sequence[np.ndarray]) -> np.ndarray:
    """uint8 (H, W, 3) images -> normalized float64 (N, 3, H, W)."""
    x = np.stack(images).astype(np.float64) / 255.0
    return ((x - IMAGE_MEAN) / IMAGE_STD).transpose(0, 3, 1, 2).copy()


def warp_pair(image, labels, focal, target_shape):
    src_shape = labels.shape[:2]
    grid = build_remap_grid(ProjectionParams.centered(focal, target_shape, src_shape), target_shape, src_shape)
    return warp_image(image, grid, 0), warp_labels(labels, grid, VOID)


def warp_directory(src, out, zoom: ZoomAugmentConfig, seed: int = 0) -> int:
    """Warp every pair of ``src`` into ``out``; returns the number written.

    Unreadable pairs are skipped with a warning. The manifest lists image
    path, label path and focal length, tab-separated.
    """
    pairs = list_pairs(src)
    if not pairs:
        raise FileNotFoundError(f"no *_image.ppm / *_label.pgm pairs in {src}")
    os.makedirs(out, exist_ok=True)
    rng = np.random.default_rng(seed)
    grids: Dict[tuple, RemapGrid] = {}
    rows = []
    for stem, img_path, lab_path in pairs:
        # draw first so a skipped pair does not shift later focal lengths
        focal = sample_focal(zoom, rng)
        try:
            image = read_netpbm(img_path)
            labels = read_netpbm(lab_path)
            if image.ndim != 3 or labels.ndim != 2 or image.shape[:2] != labels.shape:
                raise ValueError("image/label extents disagree")
        except (OSError, ValueError) as exc:
            log.warning("skipping pair %s: %s", stem, exc)
            continue
        key = (focal, labels.shape)
        if key not in grids:
            grids[key] = build_remap_grid(ProjectionParams.centered(focal, zoom.output_shape, labels.shape),
                                          zoom.output_shape, labels.shape)
        grid = grids[key]
        o_img, o_lab = pair_paths(out, stem)
        write_ppm(o_img, warp_image(image, grid, zoom.fill))
        write_pgm(o_lab, warp_labels(labels, grid, zoom.void_class))
        rows.append(f"{o_img}\t{o_lab}\t{focal!r}\n")
    with open(os.path.join(out, "manifest.tsv"), "w") as fh:
        fh.writelines(rows)
    return len(rows)


class DomainData:
    """In-memory pairs of one domain with an optional online zoom warp."""

    def __init__(self, images, labels, zoom: Optional[ZoomAugmentConfig] = None):
        if not images:
            raise ValueError("domain has no data")
        self.images, self.labels, self.zoom = images, labels, zoom

    def batch(self, n: int, rng: np.random.Generator):
        idx = rng.integers(0, len(self.images), size=n)
        imgs, labs = [], []
        for i in idx:
            img, lab = self.images[i], self.labels[i]
            if self.zoom is not None:
                img, lab = warp_pair(img, lab, sample_focal(self.zoom, rng), self.zoom.output_shape)
            imgs.append(img)
            labs.append(lab)
        return to_input(imgs), np.stack(labs).astype(np.int64)


def zoom_from_config(cfg: TrainConfig) -> Optional[ZoomAugmentConfig]:
    if cfg.zoom_mode == "none":
        return None
    return ZoomAugmentConfig(cfg.zoom_mode, cfg.focal, (cfg.focal_min, cfg.focal_max),
                             (cfg.warp_height, cfg.warp_width))


def build_trainer(cfg: TrainConfig, extra_domains: Sequence[int] = ()) -> Trainer:
    net_cfg = cfg.net_config()
    if extra_domains:
        net_cfg.domains = tuple(net_cfg.domains) + tuple(extra_domains)
    net = ToyNet(net_cfg)
    bank = DomainNormBank()
    for d in net_cfg.domains:
        bank.register_net(d, net)
    return Trainer(net, bank, cfg.loss_weights(), cfg.schedule(), tuple(range(cfg.K + 1)))


def log_header(k: int) -> List[str]:
    return ["iter", "lr"] + [f"L{i}" for i in range(k + 1)] + [f"A{i}" for i in range(k + 1)] + ["total"]


def train(cfg: TrainConfig, domains: Sequence[DomainData], out_dir=None, trainer: Optional[Trainer] = None,
          callback=None) -> Trainer:
    """Run ``cfg.max_iter`` steps; writes ``log.csv`` and a checkpoint when ``out_dir`` is set."""
    if len(domains) != cfg.K + 1:
        raise ValueError(f"config has K={cfg.K}, so {cfg.K + 1} domains are needed; got {len(domains)}")
    trainer = trainer or build_trainer(cfg)
    rng = np.random.default_rng(cfg.seed + 1)
    writer = fh = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        fh = open(os.path.join(out_dir, "log.csv"), "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(log_header(cfg.K))
    try:
        for it in range(cfg.max_iter):
            batches = {d: data.batch(cfg.batch_per_domain, rng) for d, data in enumerate(domains)}
            res = trainer.train_step(batches, it)
            if writer is not None and (it % cfg.log_every == 0 or it == cfg.max_iter - 1):
                writer.writerow([it, repr(res.lr)] + [repr(v) for v in res.main + res.aux] + [repr(res.total)])
            if callback is not None:
                callback(it, res, trainer)
    finally:
        if fh is not None:
            fh.close()
    if out_dir is not None:
        save_model(os.path.join(out_dir, "checkpoint"), cfg, trainer)
    return trainer


def save_model(directory, cfg: TrainConfig, trainer: Trainer):
    save_checkpoint(directory, {p.name: p.data for p in trainer.net.parameters()})
    with open(os.path.join(directory, "config.txt"), "w") as fh:
        fh.write(cfg.dumps())
    for d in trainer.bank.domains:
        trainer.bank.save(os.path.join(directory, f"stats_domain{d}.txt"), d)


def load_model(directory):
    """Returns ``(cfg, net, bank)`` rebuilt from a checkpoint directory."""
    from .config import load_config

    cfg = load_config(os.path.join(directory, "config.txt"))
    net = ToyNet(cfg.net_config())
    params = load_checkpoint(directory)
    named = net.named_parameters()
    if set(params) != set(named):
        raise ValueError(f"checkpoint parameters do not match the configured network: "
                         f"{sorted(set(params) ^ set(named))[:5]}")
    for name, arr in params.items():
        if arr.shape != named[name].shape:
            raise ValueError(f"{name}: checkpoint shape {arr.shape} != network shape {named[name].shape}")
        named[name].data = arr
    bank = DomainNormBank()
    for name in sorted(os.listdir(directory)):
        if name.startswith("stats_domain") and name.endswith(".txt"):
            bank.load(os.path.join(directory, name), int(name[len("stats_domain"):-4]))
    return cfg, net, bank


def evaluate(net: ToyNet, bank: DomainNormBank, images, labels, domain: int, num_classes: int) -> ConfusionMatrix:
    cm = ConfusionMatrix(num_classes)
    for lab in labels:
        cm.check_labels(np.asarray(lab).astype(np.int64), "labels")
    if domain not in bank or domain not in net.heads:
        raise KeyError(f"unknown domain {domain!r}; checkpoint has {bank.domains}")
    x = to_input(images)
    pred = predict(net, bank, x, domain)
    for p, t in zip(pred, labels):
        cm.accumulate(p, t)
    return cm


def evaluate_directory(checkpoint, data_dir, domain: int) -> ConfusionMatrix:
    cfg, net, bank = load_model(checkpoint)
    images, labels = load_pairs(data_dir)
    if not images:
        raise FileNotFoundError(f"no pairs in {data_dir}")
    return evaluate(net, bank, images, labels, domain, cfg.num_classes)
