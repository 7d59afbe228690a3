import numpy as np
import pytest
import torch
import torch.nn.functional as F

from oracles import max_gradient_rel_error
from shelfloc.data_model import ClassCatalog, InvalidInputError
from shelfloc.fcn import (
    TINY_STAGES,
    ConfigurationError,
    FcnConfig,
    build_fcn,
    classify_instance,
    forward_mask,
    load_fcn,
    output_shape_for,
    save_fcn,
    train_fcn,
)
from shelfloc.ingestion import InstanceImage
from shelfloc.training import TrainingHyperparams, fit

MINI = (4, "M", 4, "M")


def test_reference_configurations():
    cfg = FcnConfig(num_classes=10, final_kernel=(2, 4))
    assert cfg.stride == 32 and cfg.training_input_hw == (64, 128)
    model = build_fcn(cfg)
    with torch.no_grad():
        out = model(torch.rand(1, 3, 64, 128))
    assert tuple(out.shape) == (1, 11, 1, 1)
    grocery = FcnConfig(num_classes=12, include_background=False, final_kernel=(7, 5))
    assert grocery.training_input_hw == (224, 160) and grocery.out_channels == 12


def test_no_dense_layers():
    model = build_fcn(FcnConfig(num_classes=3, backbone=TINY_STAGES))
    assert not any(isinstance(m, torch.nn.Linear) for m in model.modules())
    assert model.head.kernel_size == (2, 4) and model.head.padding == (0, 0)


def test_kernel_larger_than_feature_map():
    with pytest.raises(ConfigurationError):
        FcnConfig(num_classes=2, final_kernel=(3, 3), training_input_hw=(64, 64))


def test_catalog_channel_mismatch():
    with pytest.raises(ConfigurationError):
        build_fcn(FcnConfig(num_classes=3, backbone=TINY_STAGES), ClassCatalog(("a", "b")))


def test_output_shape_examples():
    cfg = FcnConfig(num_classes=10)
    assert output_shape_for(cfg, (64, 128)) == (1, 1)
    assert output_shape_for(cfg, (128, 256)) == (3, 5)
    with pytest.raises(InvalidInputError):
        output_shape_for(cfg, (63, 128))
    model = build_fcn(cfg)
    mask = forward_mask(model, np.zeros((128, 256, 3), np.uint8))
    assert mask.shape == (11, 3, 5)


def test_shape_contract_random_sizes():
    cfg = FcnConfig(num_classes=2, backbone=TINY_STAGES, final_kernel=(3, 2))
    model = build_fcn(cfg)
    rng = np.random.default_rng(0)
    H0, W0 = cfg.training_input_hw
    for _ in range(100):
        h, w = int(rng.integers(H0, H0 + 90)), int(rng.integers(W0, W0 + 90))
        with torch.no_grad():
            out = model(torch.zeros(1, 3, h, w))
        assert tuple(out.shape[2:]) == output_shape_for(cfg, (h, w))


def test_pretrained_backbone_loading(tmp_path):
    src = build_fcn(FcnConfig(num_classes=2, backbone=MINI, final_kernel=(2, 2), seed=5))
    path = tmp_path / "vgg.pth"
    torch.save({f"features.{k}": v for k, v in src.features.state_dict().items()}, path)
    cfg = FcnConfig(num_classes=2, backbone=MINI, final_kernel=(2, 2), use_pretrained_backbone=True, pretrained_path=str(path))
    model = build_fcn(cfg)
    for a, b in zip(model.features.parameters(), src.features.parameters()):
        assert torch.equal(a, b)
    bad = FcnConfig(num_classes=2, backbone=(8, "M"), final_kernel=(2, 2), use_pretrained_backbone=True, pretrained_path=str(path))
    with pytest.raises(ConfigurationError):
        build_fcn(bad)


def test_gradient_check_miniature_fcn():
    cfg = FcnConfig(num_classes=2, backbone=MINI, final_kernel=(2, 2), seed=3)
    model = build_fcn(cfg).double()
    assert sum(p.numel() for p in model.parameters()) <= 500
    gen = torch.Generator().manual_seed(0)
    x = torch.rand(4, 3, 8, 8, generator=gen, dtype=torch.float64)
    y = torch.tensor([0, 1, 2, 1])

    def loss():
        return F.cross_entropy(model(x).flatten(1), y)

    worst = max_gradient_rel_error(model, loss)
    assert worst <= 1e-3


def _solid(color, n, hw=(16, 16), seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for k in range(n):
        img = np.zeros((*hw, 3), np.int16) + np.array(color, np.int16)
        img += rng.integers(-20, 21, size=img.shape).astype(np.int16)
        out.append(np.clip(img, 0, 255).astype(np.uint8))
    return out


RED, BLUE = (220, 30, 30), (30, 30, 220)


def _red_blue(seed):
    train = [InstanceImage(im, 1, f"r{k}") for k, im in enumerate(_solid(RED, 40, seed=seed))]
    train += [InstanceImage(im, 2, f"b{k}") for k, im in enumerate(_solid(BLUE, 40, seed=seed + 1))]
    train += [InstanceImage(im, 0, f"k{k}") for k, im in enumerate(_solid((0, 0, 0), 40, seed=seed + 2))]
    val = [InstanceImage(im, 1, f"vr{k}") for k, im in enumerate(_solid(RED, 10, seed=seed + 3))]
    val += [InstanceImage(im, 2, f"vb{k}") for k, im in enumerate(_solid(BLUE, 10, seed=seed + 4))]
    val += [InstanceImage(im, 0, f"vk{k}") for k, im in enumerate(_solid((0, 0, 0), 10, seed=seed + 5))]
    return train, val


@pytest.fixture(scope="module")
def red_blue_model():
    cfg = FcnConfig(num_classes=2, backbone=TINY_STAGES, final_kernel=(2, 2), seed=1)
    model = build_fcn(cfg, ClassCatalog(("red", "blue")))
    train, val = _red_blue(0)
    hp = TrainingHyperparams(max_epochs=20, patience=20, batch_size=16, seed=0)
    model, history = train_fcn(model, train, val, hp)
    return model, history


def test_red_blue_training(red_blue_model):
    model, history = red_blue_model
    assert max(history.val_accuracy) >= 0.95
    assert history.epochs <= 20
    assert len(history.train_loss) == len(history.val_loss) == len(history.val_accuracy)
    cid, probs = classify_instance(model, _solid(RED, 1, seed=99)[0])
    assert model.catalog.name(cid) == "red" and probs[cid] > 0.9
    assert probs.sum() == pytest.approx(1.0, abs=1e-5)


def test_classify_and_forward_mask_agree(red_blue_model):
    model, _ = red_blue_model
    img = np.random.default_rng(3).integers(0, 256, (16, 16, 3), dtype=np.uint8)
    _, probs = classify_instance(model, img)
    mask = forward_mask(model, img)
    assert mask.shape == (3, 1, 1)
    np.testing.assert_array_equal(mask.values[:, 0, 0], probs)
    with pytest.raises(InvalidInputError):
        classify_instance(model, np.zeros((16, 17, 3), np.uint8))
    big = forward_mask(model, np.random.default_rng(4).integers(0, 256, (50, 70, 3), dtype=np.uint8))
    np.testing.assert_allclose(big.channel_sums(), 1.0, atol=1e-5)


def test_translation_covariance(red_blue_model):
    model, _ = red_blue_model
    S = model.config.stride
    maps = []
    for shift in (0, S):
        canvas = np.zeros((96, 128, 3), np.uint8)
        canvas[40:56, 48 + shift:64 + shift] = RED
        maps.append(forward_mask(model, canvas).values[1])
    a = np.unravel_index(maps[0].argmax(), maps[0].shape)
    b = np.unravel_index(maps[1].argmax(), maps[1].shape)
    assert (b[0] - a[0], b[1] - a[1]) == (0, 1)


def test_training_is_deterministic():
    def run():
        cfg = FcnConfig(num_classes=2, backbone=MINI, final_kernel=(4, 4), seed=2)
        train, val = _red_blue(7)
        hp = TrainingHyperparams(max_epochs=3, patience=3, batch_size=16, seed=4, augment_flip=True, augment_scale=0.2)
        return train_fcn(build_fcn(cfg), train, val, hp)[1]

    assert run().to_dict() == run().to_dict()


def test_empty_validation_split():
    model = build_fcn(FcnConfig(num_classes=2, backbone=MINI, final_kernel=(4, 4)))
    train, _ = _red_blue(0)
    with pytest.raises(InvalidInputError):
        train_fcn(model, train, [], TrainingHyperparams())


def test_early_stop_on_flat_accuracy():
    model = torch.nn.Linear(2, 2)
    x, y = torch.randn(8, 2), torch.randint(0, 2, (8,))
    hp = TrainingHyperparams(patience=4, max_epochs=50)
    history = fit(model, lambda g: [(x, y)], F.cross_entropy, lambda: (1.0, 0.5), hp)
    assert history.stop_reason == "early_stop"
    assert history.epochs == 5 and history.best_epoch == 0


def test_checkpoint_roundtrip(tmp_path, red_blue_model):
    model, history = red_blue_model
    path = save_fcn(model, tmp_path / "m.npz", history)
    again = load_fcn(path)
    assert again.config == model.config and again.catalog == model.catalog
    x = torch.rand(2, 3, 40, 40)
    with torch.no_grad():
        assert torch.equal(again(x), model(x))


def test_gradient_clipping_bounds_the_step():
    torch.manual_seed(0)
    model = torch.nn.Linear(3, 2)
    before = torch.cat([p.detach().flatten().clone() for p in model.parameters()])
    x, y = torch.randn(16, 3) * 100, torch.randint(0, 2, (16,))
    hp = TrainingHyperparams(learning_rate=0.1, momentum=0.0, weight_decay=0.0, max_epochs=1, grad_clip=0.5)
    fit(model, lambda g: [(x, y)], F.cross_entropy, lambda: (1.0, 0.5), hp)
    after = torch.cat([p.detach().flatten() for p in model.parameters()])
    assert (after - before).norm().item() == pytest.approx(0.1 * 0.5, rel=1e-4)
    with pytest.raises(InvalidInputError):
        TrainingHyperparams(grad_clip=-1.0)
