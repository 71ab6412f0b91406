import math

import mpmath
import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from dfme_od import data, models
from dfme_od.models import NetworkSpec, PlateauSchedule, VictimTrainConfig


def test_victim_output_contract():
    torch.manual_seed(0)
    net = models.build_network(models.get_spec("victim-a")).eval()
    det = net.detect(torch.rand(1, 64, 64, 3))
    assert det.probs.shape == (1, 3) and det.box.shape == (1, 4)
    assert ((det.probs > 0) & (det.probs < 1)).all()
    assert ((det.box > 0) & (det.box < 1)).all()


def test_generator_output_contract():
    torch.manual_seed(0)
    gen = models.build_network(models.get_spec("generator", latent_dim=100))
    x = gen(torch.randn(256, 100))
    assert x.shape == (256, 64, 64, 3)
    assert x.min() >= 0 and x.max() <= 1


@pytest.mark.parametrize("name", ["student-a", "student-b", "student-small"])
def test_student_label_is_sigmoid_of_pre_label(name):
    torch.manual_seed(0)
    net = models.build_network(models.get_spec(name))
    out = net(torch.rand(4, 64, 64, 3))
    torch.testing.assert_close(out.label, torch.sigmoid(out.pre_label), atol=1e-6, rtol=0)


def test_inconsistent_specs_rejected():
    with pytest.raises(ValueError):
        models.build_network(models.get_spec("generator", image_side=48))
    with pytest.raises(ValueError):
        models.build_network(NetworkSpec("victim", (8,), class_count=1))
    with pytest.raises(ValueError):
        models.build_network(NetworkSpec("critic", (8,)))
    with pytest.raises(KeyError):
        models.get_spec("vgg16")


def test_parameter_count_reported():
    net = models.build_network(models.get_spec("student-a"))
    assert models.parameter_count(net) == sum(p.numel() for p in net.parameters()) > 0


def test_sigmoid_examples():
    assert models.sigmoid(0.0) == 0.5
    assert models.sigmoid(1000.0) == pytest.approx(1.0, abs=1e-12)
    assert models.sigmoid(-1000.0) == pytest.approx(0.0, abs=1e-12)
    exact = float(1 / (1 + mpmath.exp(-1)))
    assert models.sigmoid(1.0) == pytest.approx(exact, abs=1e-15)
    assert models.sigmoid(1.0) == pytest.approx(0.7310586, abs=1e-7)


@given(st.floats(-1e4, 1e4))
def test_sigmoid_symmetry(v):
    assert models.sigmoid(v) + models.sigmoid(-v) == pytest.approx(1.0, abs=1e-12)


def test_plateau_schedule_trace():
    sched = PlateauSchedule(1e-3, 0.5, 3, 1e-4)
    trace = [sched.step(loss) for loss in [1.0, 0.9, 0.95, 0.95, 0.95, 0.95, 0.95, 0.95]]
    assert trace[:4] == [1e-3, 1e-3, 1e-3, 1e-3]
    assert trace[4] == 5e-4  # third stagnant epoch
    assert trace[7] == 2.5e-4
    for _ in range(100):
        lr = sched.step(10.0)
    assert lr == 1e-4


def test_checkpoint_round_trip(tmp_path, tiny_victim):
    models.save_network(tiny_victim, tmp_path / "v.pt")
    back = models.load_network(tmp_path / "v.pt")
    assert back.spec == tiny_victim.spec
    assert models.weights_checksum(back) == models.weights_checksum(tiny_victim)
    x = torch.rand(3, 16, 16, 3)
    torch.testing.assert_close(back.detect(x).probs, tiny_victim.detect(x).probs)


def test_corrupt_checkpoint(tmp_path):
    bad = tmp_path / "bad.pt"
    bad.write_bytes(b"not a checkpoint")
    with pytest.raises(ValueError):
        models.load_network(bad)


def _small_arrays(n=64, side=16, seed=0):
    rng = np.random.default_rng(seed)
    spec = data.DatasetSpec(class_count=2, side=side, count=n, size_range=(0.4, 0.8), seed=seed)
    imgs, labels, boxes = [], [], []
    for i in range(n):
        img, box = data.render_sample(spec, i % 2, rng)
        imgs.append(data.scale_pixels(img))
        labels.append(i % 2)
        boxes.append(data.normalize_annotation(data.Annotation(str(i), i % 2, box, side, side)))
    return data.ArrayDataset(np.stack(imgs), np.array(labels), np.array(boxes, np.float32), 2)


def test_train_victim_loss_decreases():
    ds = _small_arrays()
    torch.manual_seed(0)
    net = models.build_network(models.get_spec("victim-a", channels=(8, 16), dense=32, image_side=16, class_count=2))
    hist = models.train_victim(net, ds, VictimTrainConfig(epochs=12, batch_size=16))
    losses_ = [e["loss"] for e in hist.epochs]
    assert len(losses_) == 12
    assert np.median(losses_[:3]) > np.median(losses_[-3:])
    assert all(e["lr"] >= 1e-4 for e in hist.epochs)
    assert not net.training


def test_train_victim_aborts_on_nonfinite_loss():
    ds = _small_arrays(n=16)
    ds.images[:] = np.nan
    net = models.build_network(models.get_spec("victim-a", channels=(8,), dense=8, image_side=16, class_count=2))
    with pytest.raises(FloatingPointError, match="epoch 0"):
        models.train_victim(net, ds, VictimTrainConfig(epochs=2, batch_size=8))


def test_train_config_validation():
    with pytest.raises(ValueError):
        VictimTrainConfig(plateau_factor=1.5).validate()
    with pytest.raises(ValueError):
        VictimTrainConfig(lr=1e-5).validate()
