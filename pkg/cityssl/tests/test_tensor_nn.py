"""
test_tensor_nn.py
"""

import math

import pytest
import numpy as np
import torch

import cityssl.modules.common_base as base
import cityssl.modules.tensor_nn as tensor_nn
from cityssl.tests.conftest import make_tiny_encoder_config

def test_encoder_output_shapes(tiny_encoder_config):
    encoder = tensor_nn.build_encoder(tiny_encoder_config, seed=1)
    batch = torch.rand(5, 32, 32, 3)
    assert tensor_nn.forward(encoder, batch).shape == (5, 16)
    assert tensor_nn.forward(encoder, torch.rand(2, 16, 16, 3)).shape \
        == (2, 16)
    images = [np.full((32, 32, 3), 100, dtype=np.uint8)] * 3
    assert tensor_nn.forward(encoder, images).shape == (3, 16)
    assert tensor_nn.forward(encoder, torch.rand(0, 32, 32, 3)).shape \
        == (0, 16)
    return

def test_transformer_output_shapes():
    encoder_config = make_tiny_encoder_config("tiny_transformer")
    encoder = tensor_nn.build_encoder(encoder_config, seed=1)
    assert tensor_nn.forward(encoder, torch.rand(3, 32, 32, 3)).shape \
        == (3, 16)
    assert tensor_nn.forward(encoder, torch.rand(3, 16, 16, 3)).shape \
        == (3, 16)
    blocks = encoder.forward_blocks(torch.rand(2, 3, 32, 32))
    assert len(blocks) == encoder_config.depth
    assert blocks[0].shape == (2, encoder_config.width)
    with pytest.raises(base.Shape_error):
        tensor_nn.forward(encoder, torch.rand(1, 20, 20, 3))
    return

def test_forward_shape_errors(tiny_encoder_config):
    encoder = tensor_nn.build_encoder(tiny_encoder_config)
    with pytest.raises(base.Shape_error):
        tensor_nn.forward(encoder, torch.rand(2, 32, 24, 3))
    with pytest.raises(base.Shape_error):
        tensor_nn.forward(encoder, torch.rand(2, 64, 64, 3))
    with pytest.raises(base.Shape_error):
        tensor_nn.forward(encoder, torch.rand(2, 32, 32, 4))
    with pytest.raises(base.Shape_error):
        tensor_nn.forward(encoder, torch.rand(32, 32, 3))
    with pytest.raises(base.Shape_error):
        tensor_nn.to_batch([])
    return

def test_build_encoder_seeded(tiny_encoder_config):
    first = tensor_nn.build_encoder(tiny_encoder_config, seed=3)
    second = tensor_nn.build_encoder(tiny_encoder_config, seed=3)
    third = tensor_nn.build_encoder(tiny_encoder_config, seed=4)
    assert tensor_nn.encoder_checksum(first) \
        == tensor_nn.encoder_checksum(second)
    assert tensor_nn.encoder_checksum(first) \
        != tensor_nn.encoder_checksum(third)
    batch = torch.rand(4, 32, 32, 3)
    assert torch.equal(tensor_nn.forward(first, batch),
                       tensor_nn.forward(second, batch))
    return

def test_encoder_config_validate():
    encoder_config = tensor_nn.Encoder_config()
    encoder_config.validate()
    encoder_config.architecture = "resnet"
    with pytest.raises(base.Config_error):
        encoder_config.validate()

    encoder_config = tensor_nn.Encoder_config()
    encoder_config.conv_kernels = "5,3"
    with pytest.raises(base.Config_error):
        encoder_config.validate()

    encoder_config = tensor_nn.Encoder_config()
    encoder_config.embedding_dim = 4
    with pytest.raises(base.Config_error):
        encoder_config.validate()

    encoder_config = make_tiny_encoder_config("tiny_transformer")
    encoder_config.input_size = 36
    with pytest.raises(base.Config_error):
        encoder_config.validate()

    encoder_config = make_tiny_encoder_config("tiny_transformer")
    encoder_config.heads = 3
    with pytest.raises(base.Config_error):
        encoder_config.validate()
    return

def test_encoder_config_dict():
    encoder_config = make_tiny_encoder_config("tiny_transformer")
    encoder_config.depth = 2
    restored = tensor_nn.encoder_config_from_dict(
        tensor_nn.encoder_config_to_dict(encoder_config))
    assert restored.__dict__ == encoder_config.__dict__
    restored = tensor_nn.encoder_config_from_dict({"depth": 6,
                                                   "unknown": 1})
    assert restored.depth == 6
    assert not hasattr(restored, "unknown")
    return

def random_encoder_shapes(architecture, count=50, seed=2024):
    """
    Seeded (architecture, batch, crop size, width) draws for gradient
    checks.
    """
    rng = np.random.Generator(np.random.Philox(key=seed))
    shapes = []
    for i in range(count):
        batch = int(rng.integers(1, 4))
        if architecture == "small_conv":
            size = int(rng.integers(8, 17))
            width = int(rng.choice([4, 6, 8]))
        else:
            size = 4 * int(rng.integers(2, 5))
            width = int(rng.choice([8, 12, 16]))
        shapes.append((architecture, batch, size, width))
    return shapes

def make_gradcheck_encoder(architecture, width):
    encoder_config = make_tiny_encoder_config(architecture)
    encoder_config.input_size = 16
    encoder_config.embedding_dim = 8
    encoder_config.conv_filters = "{},{}".format(width, width)
    encoder_config.conv_strides = "2,1"
    encoder_config.patch_size = 4
    encoder_config.width = width
    encoder_config.depth = 1
    encoder_config.heads = 2
    return tensor_nn.build_encoder(encoder_config, seed=width).double()

@pytest.mark.parametrize("architecture, batch_size, size, width",
                         random_encoder_shapes("small_conv") \
                         + random_encoder_shapes("tiny_transformer"))
def test_encoder_gradcheck(architecture, batch_size, size, width):
    encoder = make_gradcheck_encoder(architecture, width)
    generator = torch.Generator().manual_seed(size * 100 + batch_size)
    batch = torch.rand(batch_size, size, size, 3, dtype=torch.float64,
                       generator=generator).requires_grad_()
    assert torch.autograd.gradcheck(
        lambda x: tensor_nn.forward(encoder, x), (batch,), eps=1e-6,
        atol=1e-4, fast_mode=True)
    name = "features.0.weight" if architecture == "small_conv" \
        else "patch_embed.weight"
    inputs = batch.detach().permute(0, 3, 1, 2)
    first_weight = dict(encoder.named_parameters())[name]
    assert torch.autograd.gradcheck(
        lambda w: torch.func.functional_call(encoder, {name: w}, (inputs,)),
        (first_weight.detach().clone().requires_grad_(),), eps=1e-6,
        atol=1e-4, fast_mode=True)
    return

def test_backward_accumulates(tiny_encoder_config):
    encoder = tensor_nn.build_encoder(tiny_encoder_config)
    batch = torch.rand(4, 32, 32, 3)
    loss = tensor_nn.forward(encoder, batch).pow(2).sum()
    tensor_nn.backward(loss)
    first = [param.grad.clone() for param in encoder.parameters()]
    assert any(float(grad.abs().sum()) > 0.0 for grad in first)
    loss = tensor_nn.forward(encoder, batch).pow(2).sum()
    tensor_nn.backward(loss)
    for grad, param in zip(first, encoder.parameters()):
        assert torch.allclose(param.grad, 2.0 * grad, rtol=1e-5, atol=1e-7)
    tensor_nn.zero_grad(encoder.parameters())
    for param in encoder.parameters():
        assert float(param.grad.abs().sum()) == 0.0
    return

def test_backward_errors(tiny_encoder_config):
    with pytest.raises(base.State_error):
        tensor_nn.backward(torch.tensor(1.0))
    encoder = tensor_nn.build_encoder(tiny_encoder_config)
    embeddings = tensor_nn.forward(encoder, torch.rand(2, 32, 32, 3))
    with pytest.raises(base.Shape_error):
        tensor_nn.backward(embeddings)
    loss = embeddings.sum()
    tensor_nn.backward(loss)
    with pytest.raises(base.State_error):
        tensor_nn.backward(loss)
    return

def test_clip_gradients():
    params = [torch.nn.Parameter(torch.zeros(3)),
              torch.nn.Parameter(torch.zeros(4))]
    params[0].grad = torch.tensor([3.0, 0.0, 0.0])
    params[1].grad = torch.tensor([0.0, 4.0, 0.0, 0.0])
    norm = tensor_nn.clip_gradients(params, 1.0)
    assert norm == pytest.approx(5.0)
    clipped = math.sqrt(sum(float(p.grad.pow(2).sum()) for p in params))
    assert clipped == pytest.approx(1.0, rel=1e-4)
    assert tensor_nn.clip_gradients([torch.nn.Parameter(torch.zeros(2))]) \
        == 0.0
    return

def test_sgd_step():
    sgd_config = tensor_nn.SGD_config()
    sgd_config.momentum = 0.9
    sgd_config.weight_decay = 0.1
    weight = torch.nn.Parameter(torch.tensor([1.0], dtype=torch.float64))
    optimizer = tensor_nn.make_sgd([weight], sgd_config)

    weight.grad = torch.tensor([2.0], dtype=torch.float64)
    tensor_nn.sgd_step(optimizer, 0.5)
    velocity = 2.0 + 0.1 * 1.0
    expected = 1.0 - 0.5 * velocity
    assert float(weight) == pytest.approx(expected)
    assert float(weight.grad) == 0.0

    weight.grad = torch.tensor([1.0], dtype=torch.float64)
    tensor_nn.sgd_step(optimizer, 0.25)
    velocity = 0.9 * velocity + 1.0 + 0.1 * expected
    expected = expected - 0.25 * velocity
    assert float(weight) == pytest.approx(expected)
    return

def test_sgd_config_validate():
    sgd_config = tensor_nn.SGD_config()
    sgd_config.validate()
    for name, value in [("base_lr", 0.0), ("base_lr", float("nan")),
                        ("momentum", 1.0), ("weight_decay", -1.0),
                        ("batch_size", 0)]:
        sgd_config = tensor_nn.SGD_config()
        setattr(sgd_config, name, value)
        with pytest.raises(base.Config_error):
            sgd_config.validate()
    return

def test_cosine_lr():
    assert tensor_nn.cosine_lr(0, 100, 0.03) == pytest.approx(0.03)
    assert tensor_nn.cosine_lr(50, 100, 0.03) == pytest.approx(0.015)
    assert tensor_nn.cosine_lr(100, 100, 0.03) == pytest.approx(0.0,
                                                                abs=1e-12)
    values = [tensor_nn.cosine_lr(step, 100, 0.03) for step in range(101)]
    assert all(v1 >= v2 for v1, v2 in zip(values[:-1], values[1:]))
    with pytest.raises(base.Domain_error):
        tensor_nn.cosine_lr(101, 100, 0.03)
    with pytest.raises(base.Domain_error):
        tensor_nn.cosine_lr(-1, 100, 0.03)
    return

def test_step_lr():
    assert tensor_nn.step_lr(0, 10, 1.0) == pytest.approx(1.0)
    assert tensor_nn.step_lr(5, 10, 1.0) == pytest.approx(1.0)
    assert tensor_nn.step_lr(6, 10, 1.0) == pytest.approx(0.1)
    assert tensor_nn.step_lr(8, 10, 1.0) == pytest.approx(0.01)
    assert tensor_nn.step_lr(9, 10, 1.0) == pytest.approx(0.01)
    with pytest.raises(base.Domain_error):
        tensor_nn.step_lr(10, 10, 1.0)
    return

def test_l2_normalize():
    x = torch.tensor([[3.0, 4.0], [0.0, 0.0], [-1.0, 0.0]])
    normalized = tensor_nn.l2_normalize(x)
    assert torch.allclose(normalized[0], torch.tensor([0.6, 0.8]))
    assert torch.equal(normalized[1], torch.zeros(2))
    assert torch.allclose(normalized[2].norm(), torch.tensor(1.0))
    tensor_nn.check_finite(normalized)
    with pytest.raises(base.Contract_error):
        tensor_nn.check_finite(torch.tensor([1.0, float("nan")]))
    return

def test_checkpoint_round_trip(tiny_encoder_config, tmp_path):
    encoder = tensor_nn.build_encoder(tiny_encoder_config, seed=7)
    checkpoint_filename = str(tmp_path / "checkpoint.bin")
    tensors = tensor_nn.module_tensors(encoder)
    tensor_nn.save_checkpoint(checkpoint_filename, tensors,
                              {"workflow": "v2", "steps": 3})
    header, loaded = tensor_nn.load_checkpoint(checkpoint_filename)
    assert header["workflow"] == "v2"
    assert header["steps"] == 3
    assert list(loaded.keys()) == list(tensors.keys())
    for name in tensors:
        assert torch.equal(loaded[name], tensors[name].float())

    other = tensor_nn.build_encoder(tiny_encoder_config, seed=8)
    tensor_nn.load_module(other, loaded)
    assert tensor_nn.encoder_checksum(other) \
        == tensor_nn.encoder_checksum(encoder)
    return

def test_checkpoint_errors(tiny_encoder_config, tmp_path):
    encoder = tensor_nn.build_encoder(tiny_encoder_config)
    checkpoint_filename = str(tmp_path / "checkpoint.bin")
    tensors = tensor_nn.module_tensors(encoder, prefix="encoder.")
    tensor_nn.save_checkpoint(checkpoint_filename, tensors, {})

    header, loaded = tensor_nn.load_checkpoint(checkpoint_filename)
    with pytest.raises(base.Validation_error):
        tensor_nn.load_module(encoder, loaded)
    tensor_nn.load_module(encoder, loaded, prefix="encoder.")

    wider_config = make_tiny_encoder_config()
    wider_config.conv_filters = "8,24"
    wider = tensor_nn.build_encoder(wider_config)
    with pytest.raises(base.Shape_error):
        tensor_nn.load_module(wider, loaded, prefix="encoder.")

    with open(checkpoint_filename, "ab") as checkpoint_file:
        checkpoint_file.write(b"\x00" * 4)
    with pytest.raises(base.Validation_error):
        tensor_nn.load_checkpoint(checkpoint_filename)

    bogus_filename = str(tmp_path / "bogus.bin")
    with open(bogus_filename, "wb") as bogus_file:
        bogus_file.write(b"PK\x03\x04 not a checkpoint")
    with pytest.raises(base.Validation_error):
        tensor_nn.load_checkpoint(bogus_filename)
    return

def test_encoder_config_from_experiment(tiny_config):
    encoder_config = tensor_nn.encoder_config_from_experiment(tiny_config)
    assert encoder_config.input_size == 32
    assert encoder_config.embedding_dim == 16
    assert encoder_config.architecture == "small_conv"
    return
