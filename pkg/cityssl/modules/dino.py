"""
dino.py

Self-distillation pretraining: a student and an EMA teacher see
different crops of the same tile, and the student learns to match the
teacher's centered, sharpened distribution over pseudo-classes.
"""

import copy
import logging

import torch
import torch.nn as nn
import torch.nn.functional as F
from torch.nn.utils.parametrizations import weight_norm
from abserdes import Serializer

import cityssl.modules.common_base as base
import cityssl.modules.tensor_nn as tensor_nn
import cityssl.modules.augment as augment
import cityssl.modules.contrastive as contrastive

logger = logging.getLogger(__name__)

NUM_GLOBAL_CROPS = 2

class Dino_config(Serializer):
    """
    Settings of one self-distillation run.

    Attributes:
    -----------
    pseudo_classes : int, Default 1024
        Output size P of the pseudo-class head.

    student_temperature : float, Default 0.1
    teacher_temperature : float, Default 0.04
        Must be smaller than student_temperature.

    teacher_momentum : float, Default 0.996
    center_momentum : float, Default 0.9

    local_crops : int, Default 4
    local_size : int, Default 0
        Size of local crops; 0 means half the input size.

    centering : bool, Default True
        Subtract the running center from teacher outputs. Turning it
        off lets the teacher collapse toward one-hot outputs.

    weight_norm : bool, Default True
        Weight-normalize the last layer of the head.
    """

    def __init__(self):
        self.pseudo_classes = 1024
        self.student_temperature = 0.1
        self.teacher_temperature = 0.04
        self.teacher_momentum = 0.996
        self.center_momentum = 0.9
        self.local_crops = 4
        self.local_size = 0
        self.hidden_dim = 256
        self.bottleneck_dim = 64
        self.centering = True
        self.weight_norm = True
        self.batch_size = 32
        self.base_lr = 0.03
        self.sgd_momentum = 0.9
        self.weight_decay = 1e-4
        self.clip_norm = tensor_nn.DEFAULT_CLIP_NORM
        self.total_steps = 2000
        self.debug = False
        return

    def validate(self):
        if self.pseudo_classes < 2:
            raise base.Config_error("pseudo_classes must be at least 2.")
        if self.student_temperature <= 0.0 or self.teacher_temperature <= 0.0:
            raise base.Config_error("Temperatures must be positive.")
        if not self.teacher_temperature < self.student_temperature:
            raise base.Config_error("teacher_temperature must be smaller "\
                                    "than student_temperature.")
        for name in ["teacher_momentum", "center_momentum"]:
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise base.Config_error("{} must lie in [0, 1].".format(name))
        if self.local_crops < 0:
            raise base.Config_error("local_crops must be nonnegative.")
        return

    def sgd_config(self):
        sgd_config = tensor_nn.SGD_config()
        sgd_config.base_lr = self.base_lr
        sgd_config.momentum = self.sgd_momentum
        sgd_config.weight_decay = self.weight_decay
        sgd_config.batch_size = self.batch_size
        sgd_config.clip_norm = self.clip_norm
        return sgd_config

def dino_config(config=None):
    dino = Dino_config()
    if config is not None:
        dino.pseudo_classes = config.pseudo_classes
        dino.local_crops = config.local_crops
        dino.batch_size = config.batch_size
        dino.total_steps = config.pretrain_steps
        dino.debug = config.debug
    dino.validate()
    return dino

class Pseudo_class_head(nn.Module):
    """
    MLP to a bottleneck, L2 normalization, then a (weight-normalized)
    bias-free linear layer to the pseudo-class logits.
    """

    def __init__(self, embedding_dim, pseudo_classes, hidden_dim=256,
                 bottleneck_dim=64, use_weight_norm=True, seed=0):
        super(Pseudo_class_head, self).__init__()
        self.mlp = tensor_nn.init_weights(nn.Sequential(
            nn.Linear(embedding_dim, hidden_dim), nn.GELU(),
            nn.Linear(hidden_dim, bottleneck_dim)),
            base.derive_seed(seed, "mlp"))
        last = tensor_nn.init_weights(
            nn.Linear(bottleneck_dim, pseudo_classes, bias=False),
            base.derive_seed(seed, "last"))
        if use_weight_norm:
            last = weight_norm(last)
        self.last = last
        return

    def forward(self, x):
        return self.last(tensor_nn.l2_normalize(self.mlp(x)))

class Student_model(nn.Module):
    def __init__(self, encoder, head):
        super(Student_model, self).__init__()
        self.encoder = encoder
        self.head = head
        return

    def forward(self, batch):
        return self.head(tensor_nn.forward(self.encoder, batch))

def teacher_distribution(logits, center, teacher_temperature):
    """
    softmax((logits - center) / teacher_temperature) over the last axis.
    """
    if teacher_temperature <= 0.0:
        raise base.Config_error("teacher_temperature must be positive.")
    return F.softmax((logits - center) / teacher_temperature, dim=-1)

def dino_loss(student_logits, teacher_logits, center, student_temperature,
              teacher_temperature):
    """
    Mean cross-entropy between the teacher distribution of every global
    crop and the student distribution of every other crop.

    Parameters:
    -----------
    student_logits : list of torch.Tensor
        One B x P tensor per crop, global crops first.

    teacher_logits : list of torch.Tensor
        One B x P tensor per global crop. Treated as constants.

    center : torch.Tensor
        Length-P center subtracted from teacher logits.
    """
    if len(teacher_logits) < NUM_GLOBAL_CROPS:
        raise base.Config_error("Self-distillation needs at least {} global"\
                                " crops.".format(NUM_GLOBAL_CROPS))
    teacher_probs = [teacher_distribution(logits.detach(), center.detach(),
                                          teacher_temperature) \
                     for logits in teacher_logits]
    student_log_probs = [F.log_softmax(logits / student_temperature, dim=-1)\
                         for logits in student_logits]
    total = 0.0
    num_pairs = 0
    for g, probs in enumerate(teacher_probs):
        for s, log_probs in enumerate(student_log_probs):
            if s == g:
                continue
            total = total + (-(probs * log_probs).sum(dim=-1)).mean()
            num_pairs += 1
    if num_pairs == 0:
        raise base.Config_error("No student crop differs from a teacher "\
                                "crop.")
    return total / num_pairs

def center_update(center, teacher_logits, center_momentum):
    """
    center <- m * center + (1 - m) * mean of the teacher logit rows.
    """
    if not 0.0 <= center_momentum <= 1.0:
        raise base.Config_error("center_momentum must lie in [0, 1].")
    batch_mean = teacher_logits.detach().mean(dim=0)
    return center * center_momentum + batch_mean * (1.0 - center_momentum)

def mean_teacher_entropy(teacher_logits, center, teacher_temperature):
    """
    Mean entropy (nats) of the teacher distributions over all rows of
    all global crops.
    """
    entropies = []
    for logits in teacher_logits:
        probs = teacher_distribution(logits.detach(), center,
                                     teacher_temperature)
        entropies.append(-(probs * torch.log(probs.clamp_min(1e-30)))\
                         .sum(dim=-1))
    return float(torch.cat(entropies).mean())

class Distillation_state():
    """
    Everything a self-distillation run owns: student, teacher, center,
    optimizer and view factory.
    """

    def __init__(self, config, encoder_config, seed=0, recipe_overrides=None):
        config.validate()
        self.config = config
        self.encoder_config = encoder_config
        self.seed = seed
        encoder = tensor_nn.build_encoder(encoder_config, seed)
        head = Pseudo_class_head(
            encoder_config.embedding_dim, config.pseudo_classes,
            config.hidden_dim, config.bottleneck_dim, config.weight_norm,
            base.derive_seed(seed, "pseudo_class_head"))
        self.student = Student_model(encoder, head)
        self.teacher = copy.deepcopy(self.student)
        for param in self.teacher.parameters():
            param.requires_grad_(False)
        self.center = torch.zeros(config.pseudo_classes)
        self.optimizer = tensor_nn.make_sgd(self.student.parameters(),
                                            config.sgd_config())
        local_size = config.local_size if config.local_size > 0 else None
        self.factory = augment.View_factory(
            "dino", encoder_config.input_size, config.local_crops,
            local_size, recipe_overrides)
        self.step = 0
        self.teacher_entropy = []
        return

    def encoder(self):
        return self.student.encoder

    def learning_rate(self):
        return tensor_nn.cosine_lr(self.step, self.config.total_steps,
                                   self.config.base_lr)

    def checkpoint_tensors(self):
        tensors = tensor_nn.module_tensors(self.student.encoder, "encoder.")
        tensors.update(tensor_nn.module_tensors(self.student.head, "head."))
        tensors.update(tensor_nn.module_tensors(self.teacher, "teacher."))
        tensors["center"] = self.center
        return tensors

def distill_views_step(views, state):
    """
    One step on pre-augmented crops (global crops first).

    Returns:
    --------
    loss : float
    lr : float
    """
    with torch.no_grad():
        teacher_logits = [state.teacher(crops) \
                          for crops in views[:NUM_GLOBAL_CROPS]]
    student_logits = [state.student(crops) for crops in views]
    loss = dino_loss(student_logits, teacher_logits, state.center,
                     state.config.student_temperature,
                     state.config.teacher_temperature)
    tensor_nn.backward(loss)
    if state.config.clip_norm > 0.0:
        tensor_nn.clip_gradients(state.student.parameters(),
                                 state.config.clip_norm)
    lr = state.learning_rate()
    tensor_nn.sgd_step(state.optimizer, lr)
    contrastive.ema_update(state.teacher, state.student,
                           state.config.teacher_momentum)
    state.teacher_entropy.append(mean_teacher_entropy(
        teacher_logits, state.center, state.config.teacher_temperature))
    if state.config.centering:
        state.center = center_update(state.center,
                                     torch.cat(teacher_logits),
                                     state.config.center_momentum)
    if state.config.debug:
        contrastive.assert_no_gradients(state.teacher)
        tensor_nn.check_finite(state.center, "center")
    state.step += 1
    return float(loss.detach()), lr

def distill_step(batch, state, draw):
    """
    Multi-crop a batch of uint8 images (draw selects the generator
    streams) and take one self-distillation step.
    """
    views = augment.make_batch_views(state.factory, batch, state.seed, draw)
    return distill_views_step(views, state)

def distill(config, encoder_config, pool, seed=0, recipe_overrides=None,
            log_interval=100, num_workers=0, loss_filename=None,
            checkpoint_filename=None, checkpoint_every=0):
    """
    Run self-distillation for config.total_steps steps.

    Returns:
    --------
    state : Distillation_state
    log : Loss_log
    """
    state = Distillation_state(config, encoder_config, seed, recipe_overrides)
    log = contrastive.run_training(
        state, pool, distill_views_step, 0, "dino", log_interval,
        num_workers, loss_filename, checkpoint_filename, checkpoint_every)
    return state, log
