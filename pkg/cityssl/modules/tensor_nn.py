"""
tensor_nn.py

The small numerical core every workflow trains: encoder configurations,
the small convolutional and tiny transformer encoders, gradient helpers,
SGD with momentum, learning-rate schedules, and the binary checkpoint
format.
"""

import io
import json
import math
import struct
import hashlib
import logging
from collections import OrderedDict

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils import parametrize
from abserdes import Serializer

import cityssl.modules.common_base as base

logger = logging.getLogger(__name__)

ARCHITECTURES = ("small_conv", "tiny_transformer")
CHECKPOINT_MAGIC = b"CITYSSL\x01"
DEFAULT_CLIP_NORM = 5.0
MIN_EMBEDDING_DIM = 8
MIN_CONV_INPUT = 8
# fixed per-channel normalization applied inside every encoder
PIXEL_MEAN = (0.5, 0.5, 0.5)
PIXEL_STD = (0.25, 0.25, 0.25)

class Encoder_config(Serializer):
    """
    The shape of an encoder.

    Attributes:
    -----------
    input_size : int, Default 64
        Width and height of the (square) training crops.

    conv_filters, conv_kernels, conv_strides : str
        Comma-separated per-layer settings of the small_conv encoder.

    embedding_dim : int, Default 128
        Length of the flat embedding every encoder outputs.

    architecture : str, Default "small_conv"
        "small_conv" or "tiny_transformer".

    patch_size, width, depth, heads : int
        Settings of the tiny_transformer encoder.
    """

    def __init__(self):
        self.input_size = 64
        self.conv_filters = "32,64,128"
        self.conv_kernels = "5,3,3"
        self.conv_strides = "2,2,2"
        self.embedding_dim = 128
        self.architecture = "small_conv"
        self.patch_size = 8
        self.width = 64
        self.depth = 4
        self.heads = 4
        return

    def conv_layers(self):
        """
        Return the convolution layers as (filters, kernel, stride) tuples.
        """
        filters = [int(x) for x in base.split_list(self.conv_filters)]
        kernels = [int(x) for x in base.split_list(self.conv_kernels)]
        strides = [int(x) for x in base.split_list(self.conv_strides)]
        if not len(filters) == len(kernels) == len(strides):
            raise base.Config_error("conv_filters, conv_kernels and "\
                                    "conv_strides must have equal lengths.")
        return list(zip(filters, kernels, strides))

    def validate(self):
        if self.architecture not in ARCHITECTURES:
            raise base.Config_error("Unknown architecture: {}".format(
                self.architecture))
        if self.embedding_dim < MIN_EMBEDDING_DIM:
            raise base.Config_error("embedding_dim must be at least {}."\
                                    .format(MIN_EMBEDDING_DIM))
        if self.input_size < MIN_CONV_INPUT:
            raise base.Config_error("input_size must be at least {}.".format(
                MIN_CONV_INPUT))
        if self.architecture == "small_conv":
            layers = self.conv_layers()
            if len(layers) == 0:
                raise base.Config_error("small_conv needs at least one "\
                                        "convolution layer.")
            for filters, kernel, stride in layers:
                if min(filters, kernel, stride) < 1:
                    raise base.Config_error("Convolution settings must be "\
                                            "positive.")
        else:
            if self.input_size % self.patch_size != 0:
                raise base.Config_error("input_size must be a multiple of "\
                                        "patch_size.")
            if self.width % self.heads != 0:
                raise base.Config_error("width must be a multiple of heads.")
        return

class SGD_config(Serializer):
    """
    Settings of SGD with momentum.

    Attributes:
    -----------
    base_lr : float, Default 0.03
    momentum : float, Default 0.9
    weight_decay : float, Default 1e-4
    batch_size : int, Default 32
    clip_norm : float, Default 5.0
        Global gradient-norm clip; 0 disables clipping.
    """

    def __init__(self):
        self.base_lr = 0.03
        self.momentum = 0.9
        self.weight_decay = 1e-4
        self.batch_size = 32
        self.clip_norm = DEFAULT_CLIP_NORM
        return

    def validate(self):
        for name in ["base_lr", "momentum", "weight_decay", "clip_norm"]:
            if not math.isfinite(getattr(self, name)):
                raise base.Config_error("{} must be finite.".format(name))
        if self.base_lr <= 0.0:
            raise base.Config_error("base_lr must be positive.")
        if not 0.0 <= self.momentum < 1.0:
            raise base.Config_error("momentum must lie in [0, 1).")
        if self.weight_decay < 0.0 or self.clip_norm < 0.0:
            raise base.Config_error("weight_decay and clip_norm must be "\
                                    "nonnegative.")
        if self.batch_size < 1:
            raise base.Config_error("batch_size must be positive.")
        return

class Pixel_normalize(nn.Module):
    def __init__(self):
        super(Pixel_normalize, self).__init__()
        self.register_buffer(
            "mean", torch.tensor(PIXEL_MEAN).view(1, 3, 1, 1))
        self.register_buffer(
            "std", torch.tensor(PIXEL_STD).view(1, 3, 1, 1))
        return

    def forward(self, x):
        return (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)

class Small_conv(nn.Module):
    """
    Convolutions with ReLU, global average pooling, then a bias-free
    linear map to the embedding.
    """

    def __init__(self, config):
        super(Small_conv, self).__init__()
        self.config = config
        self.normalize = Pixel_normalize()
        layers = []
        in_channels = 3
        for filters, kernel, stride in config.conv_layers():
            layers.append(nn.Conv2d(in_channels, filters, kernel, stride,
                                    padding=kernel//2))
            layers.append(nn.ReLU())
            in_channels = filters
        self.features = nn.Sequential(*layers)
        self.fc = nn.Linear(in_channels, config.embedding_dim, bias=False)
        self.feature_dim = in_channels
        return

    def accepts_size(self, size):
        return MIN_CONV_INPUT <= size <= self.config.input_size

    def forward_features(self, x):
        return self.features(self.normalize(x)).mean(dim=(2, 3))

    def forward(self, x):
        return self.fc(self.forward_features(x))

class Tiny_transformer(nn.Module):
    """
    A small vision transformer with a class token. Positional embeddings
    are interpolated for crops smaller than input_size.
    """

    def __init__(self, config):
        super(Tiny_transformer, self).__init__()
        self.config = config
        self.normalize = Pixel_normalize()
        self.patch_embed = nn.Conv2d(3, config.width, config.patch_size,
                                     config.patch_size)
        grid = config.input_size // config.patch_size
        self.grid = grid
        self.cls_token = nn.Parameter(torch.zeros(1, 1, config.width))
        self.pos_embed = nn.Parameter(
            torch.zeros(1, grid*grid + 1, config.width))
        self.blocks = nn.ModuleList([
            nn.TransformerEncoderLayer(
                config.width, config.heads, dim_feedforward=4*config.width,
                dropout=0.0, activation="gelu", batch_first=True,
                norm_first=True)
            for i in range(config.depth)])
        self.norm = nn.LayerNorm(config.width)
        self.fc = nn.Linear(config.width, config.embedding_dim, bias=False)
        self.feature_dim = config.width
        return

    def accepts_size(self, size):
        return size % self.config.patch_size == 0 \
            and self.config.patch_size <= size <= self.config.input_size

    def positional_embedding(self, grid):
        if grid == self.grid:
            return self.pos_embed
        cls_pos = self.pos_embed[:, :1]
        patch_pos = self.pos_embed[:, 1:].reshape(
            1, self.grid, self.grid, -1).permute(0, 3, 1, 2)
        patch_pos = F.interpolate(patch_pos, size=(grid, grid),
                                  mode="bilinear", align_corners=False)
        patch_pos = patch_pos.permute(0, 2, 3, 1).reshape(1, grid*grid, -1)
        return torch.cat([cls_pos, patch_pos], dim=1)

    def forward_blocks(self, x):
        """
        Return the normalized class-token output of every block.
        """
        tokens = self.patch_embed(self.normalize(x))
        grid = tokens.shape[-1]
        tokens = tokens.flatten(2).transpose(1, 2)
        cls = self.cls_token.expand(tokens.shape[0], -1, -1)
        tokens = torch.cat([cls, tokens], dim=1) \
            + self.positional_embedding(grid)
        outputs = []
        for block in self.blocks:
            tokens = block(tokens)
            outputs.append(self.norm(tokens[:, 0]))
        return outputs

    def forward_features(self, x):
        return self.forward_blocks(x)[-1]

    def forward(self, x):
        return self.fc(self.forward_features(x))

def init_weights(module, seed):
    """
    Seeded Kaiming-uniform (fan-in) initialization of every convolution
    and linear layer; zero biases; small normal class token and
    positional embeddings.
    """
    generator = torch.Generator().manual_seed(int(seed) % 2**63)
    for submodule in module.modules():
        if parametrize.is_parametrized(submodule):
            continue
        if isinstance(submodule, (nn.Conv2d, nn.Linear)):
            fan_in = submodule.weight[0].numel()
            bound = math.sqrt(6.0 / fan_in)
            with torch.no_grad():
                submodule.weight.copy_(torch.empty_like(submodule.weight)\
                    .uniform_(-bound, bound, generator=generator))
                if submodule.bias is not None:
                    submodule.bias.zero_()
        elif isinstance(submodule, nn.MultiheadAttention):
            if submodule.in_proj_weight is not None:
                bound = math.sqrt(6.0 / submodule.in_proj_weight.shape[1])
                with torch.no_grad():
                    submodule.in_proj_weight.copy_(torch.empty_like(
                        submodule.in_proj_weight).uniform_(
                            -bound, bound, generator=generator))
                    submodule.in_proj_bias.zero_()
        elif isinstance(submodule, Tiny_transformer):
            with torch.no_grad():
                submodule.cls_token.copy_(torch.empty_like(
                    submodule.cls_token).normal_(0.0, 0.02,
                                                 generator=generator))
                submodule.pos_embed.copy_(torch.empty_like(
                    submodule.pos_embed).normal_(0.0, 0.02,
                                                 generator=generator))
    return module

def build_encoder(config, seed=0):
    """
    Construct and initialize the encoder an Encoder_config describes.
    """
    config.validate()
    if config.architecture == "small_conv":
        encoder = Small_conv(config)
    else:
        encoder = Tiny_transformer(config)
    return init_weights(encoder, seed)

def to_batch(images):
    """
    Stack uint8 HxWx3 arrays (or float tensors in [0,1]) into a float32
    B x H x W x 3 tensor with values in [0,1].
    """
    if isinstance(images, torch.Tensor):
        return images.float()
    if len(images) == 0:
        raise base.Shape_error("Cannot build a batch from zero images "\
                               "without a shape.")
    tensors = []
    for image in images:
        if isinstance(image, np.ndarray):
            tensors.append(torch.from_numpy(
                np.ascontiguousarray(image)).float() / 255.0)
        else:
            tensors.append(image.float())
    return torch.stack(tensors)

def forward(encoder, batch):
    """
    Embed a B x H x W x 3 batch with values in [0,1].

    The crop must be square, at most the configured input_size and, for
    the transformer, a multiple of the patch size.

    Returns:
    --------
    embeddings : torch.Tensor
        B x embedding_dim.
    """
    if not isinstance(batch, torch.Tensor):
        batch = to_batch(batch)
    if batch.ndim != 4 or batch.shape[3] != 3:
        raise base.Shape_error("Expected a B x H x W x 3 batch, got shape "\
                               "{}".format(tuple(batch.shape)))
    if batch.shape[1] != batch.shape[2] \
            or not encoder.accepts_size(batch.shape[1]):
        raise base.Shape_error("Crop size {}x{} does not fit the encoder "\
            "(input_size {}).".format(batch.shape[1], batch.shape[2],
                                      encoder.config.input_size))
    parameter = next(encoder.parameters())
    if batch.shape[0] == 0:
        return torch.zeros(0, encoder.config.embedding_dim,
                           dtype=parameter.dtype)
    x = batch.to(parameter.dtype).permute(0, 3, 1, 2).contiguous()
    return encoder(x)

def backward(loss):
    """
    Accumulate the gradients of a scalar loss into every parameter that
    contributed to it.
    """
    if not isinstance(loss, torch.Tensor) or not loss.requires_grad:
        raise base.State_error("backward() needs a loss produced by a "\
                               "recorded forward pass.")
    if loss.numel() != 1:
        raise base.Shape_error("backward() needs a scalar loss.")
    try:
        loss.backward()
    except RuntimeError as err:
        raise base.State_error("Gradient graph not available: {}".format(
            err))
    return

def zero_grad(params):
    for param in params:
        if param.grad is not None:
            param.grad.zero_()
    return

def clip_gradients(params, max_norm=DEFAULT_CLIP_NORM):
    """
    Scale the gradients so that their global L2 norm is at most
    max_norm. Return the norm before clipping.
    """
    params = [param for param in params if param.grad is not None]
    if len(params) == 0:
        return 0.0
    total_norm = nn.utils.clip_grad_norm_(params, max_norm)
    return float(total_norm)

def make_sgd(params, config):
    """
    Build the momentum optimizer for a set of parameters. The update is
    v = momentum*v + grad + weight_decay*w; w = w - lr*v.
    """
    config.validate()
    return torch.optim.SGD(list(params), lr=config.base_lr,
                           momentum=config.momentum, dampening=0.0,
                           weight_decay=config.weight_decay, nesterov=False)

def sgd_step(optimizer, lr_now):
    """
    Apply one update at learning rate lr_now, then zero the gradients.
    """
    for group in optimizer.param_groups:
        group["lr"] = lr_now
    optimizer.step()
    optimizer.zero_grad(set_to_none=False)
    return

def cosine_lr(step, total_steps, base_lr):
    if step < 0 or step > total_steps or total_steps <= 0:
        raise base.Domain_error("step must lie in [0, total_steps]: "\
                                "{} of {}".format(step, total_steps))
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))

def step_lr(epoch, total_epochs, base_lr, milestones=(0.6, 0.8),
            factor=0.1):
    """
    Multiply base_lr by factor once for every milestone (a fraction of
    total_epochs) already reached.
    """
    if epoch < 0 or epoch >= total_epochs:
        raise base.Domain_error("epoch must lie in [0, total_epochs): "\
                                "{} of {}".format(epoch, total_epochs))
    passed = sum(1 for milestone in milestones \
                 if epoch >= int(round(milestone * total_epochs)))
    return base_lr * factor**passed

def l2_normalize(x, eps=1e-12):
    """
    Scale every row to unit L2 norm.
    """
    return F.normalize(x, p=2.0, dim=-1, eps=eps)

def check_finite(tensor, name="tensor"):
    if not bool(torch.isfinite(tensor).all()):
        raise base.Contract_error("{} contains NaN or Inf.".format(name))
    return

def module_tensors(module, prefix=""):
    """
    Return the parameters of a module as an ordered name -> tensor map,
    in declaration order.
    """
    tensors = OrderedDict()
    for name, param in module.named_parameters():
        tensors[prefix + name] = param.detach()
    return tensors

def encoder_checksum(encoder):
    """
    Return a sha256 hex digest of the encoder's parameter names and
    float32 values.
    """
    digest = hashlib.sha256()
    for name, tensor in module_tensors(encoder).items():
        digest.update(name.encode("utf-8"))
        digest.update(tensor.cpu().float().numpy().astype("<f4").tobytes())
    return digest.hexdigest()

def save_checkpoint(checkpoint_filename, tensors, header):
    """
    Write a checkpoint: magic bytes, the JSON header length as a
    little-endian uint64, the JSON header, then every tensor as raw
    little-endian float32 in the given order. The header records each
    tensor's name and shape.
    """
    header = dict(header)
    header["tensors"] = [{"name": name, "shape": list(tensor.shape)} \
                         for name, tensor in tensors.items()]
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    buffer = io.BytesIO()
    buffer.write(CHECKPOINT_MAGIC)
    buffer.write(struct.pack("<Q", len(header_bytes)))
    buffer.write(header_bytes)
    for tensor in tensors.values():
        buffer.write(tensor.detach().cpu().float().numpy().astype("<f4")\
                     .tobytes())
    base.write_bytes_atomic(checkpoint_filename, buffer.getvalue())
    return

def load_checkpoint(checkpoint_filename):
    """
    Read a checkpoint written by save_checkpoint().

    Returns:
    --------
    header : dict
    tensors : OrderedDict
        name -> float32 torch tensor.
    """
    with open(checkpoint_filename, "rb") as checkpoint_file:
        data = checkpoint_file.read()
    if not data.startswith(CHECKPOINT_MAGIC):
        raise base.Validation_error("Not a cityssl checkpoint: {}".format(
            checkpoint_filename))
    offset = len(CHECKPOINT_MAGIC)
    header_length = struct.unpack("<Q", data[offset:offset+8])[0]
    offset += 8
    header = json.loads(data[offset:offset+header_length].decode("utf-8"))
    offset += header_length
    tensors = OrderedDict()
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        values = np.frombuffer(data, dtype="<f4", count=count, offset=offset)
        offset += 4 * count
        tensors[entry["name"]] = torch.from_numpy(
            values.astype(np.float32).reshape(entry["shape"]))
    if offset != len(data):
        raise base.Validation_error("Checkpoint size does not match its "\
                                    "header: {}".format(checkpoint_filename))
    return header, tensors

def load_module(module, tensors, prefix=""):
    """
    Copy checkpoint tensors into a module's parameters.
    """
    with torch.no_grad():
        for name, param in module.named_parameters():
            key = prefix + name
            if key not in tensors:
                raise base.Validation_error("Checkpoint lacks {}".format(key))
            if tuple(tensors[key].shape) != tuple(param.shape):
                raise base.Shape_error("Checkpoint shape mismatch for {}"\
                                       .format(key))
            param.copy_(tensors[key])
    return module

def encoder_config_from_experiment(config):
    """
    Build the Encoder_config of an Experiment_config.
    """
    encoder_config = Encoder_config()
    encoder_config.input_size = config.input_size
    encoder_config.embedding_dim = config.embedding_dim
    encoder_config.architecture = config.architecture
    return encoder_config

def encoder_config_to_dict(config):
    return dict(config.__dict__)

def encoder_config_from_dict(config_dict):
    encoder_config = Encoder_config()
    for key, value in config_dict.items():
        if hasattr(encoder_config, key):
            setattr(encoder_config, key, value)
    return encoder_config
