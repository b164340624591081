import numpy as np

from rdcseg.config import TrainConfig
from rdcseg.experiments import adabn_experiment, distortion_experiment
from rdcseg.runner import DomainData, load_model, save_model, train


def test_adabn_short_run_keeps_idle_domain():
    res = adabn_experiment(iters=20)
    assert res.unused_unchanged
    assert res.measured_shift.shape == res.expected_shift.shape == (8,)


def test_distortion_smoke():
    res = distortion_experiment(scenes=24, val=8, iters=12, batch=4)
    assert set(res.miou) == {"regular", "RDC"}
    assert all(0.0 <= v <= 1.0 for v in res.miou.values())
    # offsets stay frozen for the first 2 of 12 iterations, then move
    assert res.offset_magnitude > 0.0


def test_checkpoint_roundtrip_predicts_identically(tmp_path):
    rng = np.random.default_rng(0)
    images = [rng.integers(0, 256, size=(16, 16, 3), dtype=np.uint8) for _ in range(4)]
    labels = [rng.integers(0, 3, size=(16, 16), dtype=np.uint8) for _ in range(4)]
    cfg = TrainConfig(max_iter=3, K=0, blocks="down:4,nb:rdc:1", num_classes=3, aux_channels=4,
                      zoom_mode="none", batch_per_domain=2).validate()
    trainer = train(cfg, [DomainData(images, labels)])
    save_model(tmp_path / "ck", cfg, trainer)
    cfg2, net, bank = load_model(tmp_path / "ck")
    assert cfg2 == cfg
    for name, p in trainer.net.named_parameters().items():
        np.testing.assert_array_equal(net.named_parameters()[name].data, p.data.astype(np.float32))
    for k, (m, v) in trainer.bank.snapshot(0).items():
        assert np.array_equal(bank.get(0)[k].mean, m) and np.array_equal(bank.get(0)[k].var, v)
