"""
contrastive.py

Momentum-contrast pretraining (the V1 and V2 workflows): the negative
queue, the query/key encoder pair with its momentum update, the InfoNCE
loss, and the training loop shared with self-distillation.
"""

import os
import copy
import itertools
import collections
import logging
import threading
from concurrent.futures import ThreadPoolExecutor

import pandas as pd
import torch
import torch.nn as nn
import torch.nn.functional as F
from abserdes import Serializer

import cityssl.modules.common_base as base
import cityssl.modules.tensor_nn as tensor_nn
import cityssl.modules.augment as augment

logger = logging.getLogger(__name__)

UNIT_NORM_TOLERANCE = 1e-3
PREFETCH_DEPTH = 4

class Contrastive_config(Serializer):
    """
    Settings of one momentum-contrast run.

    Attributes:
    -----------
    recipe : str, Default "v2"
        "v1" or "v2". Selects augmentations, projection head,
        temperature and learning-rate schedule.

    temperature : float
        Softmax temperature; 0.07 for v1 and 0.2 for v2.

    queue_size : int, Default 1024
        Number of negatives K. Must be a multiple of batch_size.

    key_momentum : float, Default 0.999
        EMA coefficient of the key encoder.

    schedule : str
        "step" (v1) or "cosine" (v2).
    """

    def __init__(self):
        self.recipe = "v2"
        self.temperature = 0.2
        self.queue_size = 1024
        self.batch_size = 32
        self.key_momentum = 0.999
        self.schedule = "cosine"
        self.base_lr = 0.03
        self.sgd_momentum = 0.9
        self.weight_decay = 1e-4
        self.clip_norm = tensor_nn.DEFAULT_CLIP_NORM
        self.total_steps = 2000
        self.debug = False
        return

    def validate(self):
        if self.recipe not in ["v1", "v2"]:
            raise base.Config_error("Unknown contrastive recipe: {}".format(
                self.recipe))
        if self.temperature <= 0.0:
            raise base.Config_error("temperature must be positive.")
        if self.batch_size < 1 or self.queue_size < self.batch_size:
            raise base.Config_error("queue_size must be at least batch_size.")
        if self.queue_size % self.batch_size != 0:
            raise base.Config_error("queue_size ({}) must be divisible by "\
                "batch_size ({}).".format(self.queue_size, self.batch_size))
        if not 0.0 <= self.key_momentum <= 1.0:
            raise base.Config_error("key_momentum must lie in [0, 1].")
        if self.schedule not in ["step", "cosine"]:
            raise base.Config_error("schedule must be 'step' or 'cosine'.")
        return

    def sgd_config(self):
        sgd_config = tensor_nn.SGD_config()
        sgd_config.base_lr = self.base_lr
        sgd_config.momentum = self.sgd_momentum
        sgd_config.weight_decay = self.weight_decay
        sgd_config.batch_size = self.batch_size
        sgd_config.clip_norm = self.clip_norm
        return sgd_config

def contrastive_config(recipe, config=None):
    """
    Return the Contrastive_config of a recipe, with the desk-scale values
    of an Experiment_config when one is given.
    """
    contrastive = Contrastive_config()
    contrastive.recipe = recipe
    if recipe == "v1":
        contrastive.temperature = 0.07
        contrastive.schedule = "step"
    if config is not None:
        contrastive.queue_size = config.queue_size
        contrastive.batch_size = config.batch_size
        contrastive.total_steps = config.pretrain_steps
        contrastive.debug = config.debug
    contrastive.validate()
    return contrastive

class Negative_queue():
    """
    A FIFO ring of unit-norm key embeddings.

    Attributes:
    -----------
    capacity : int
    entries : torch.Tensor
        capacity x dim.
    cursor : int
        Next slot to write.
    count : int
        Number of occupied slots, at most capacity.
    """

    def __init__(self, capacity, dim):
        if capacity < 1:
            raise base.Config_error("Queue capacity must be positive.")
        self.capacity = capacity
        self.dim = dim
        self.entries = torch.zeros(capacity, dim)
        self.cursor = 0
        self.count = 0
        return

    def is_full(self):
        return self.count == self.capacity

    def negatives(self):
        """
        Return the occupied rows. Slots fill from index 0, so before the
        queue is full they are the first count rows.
        """
        if self.is_full():
            return self.entries
        return self.entries[:self.count]

    def enqueue(self, keys):
        keys = keys.detach()
        if keys.ndim != 2 or keys.shape[1] != self.dim:
            raise base.Shape_error("Keys must have shape B x {}".format(
                self.dim))
        batch_size = keys.shape[0]
        if batch_size > self.capacity:
            raise base.Config_error("Cannot enqueue {} keys into a queue of "\
                "capacity {}.".format(batch_size, self.capacity))
        slots = (self.cursor + torch.arange(batch_size)) % self.capacity
        self.entries[slots] = keys.to(self.entries.dtype)
        self.cursor = (self.cursor + batch_size) % self.capacity
        self.count = min(self.capacity, self.count + batch_size)
        return

def enqueue(queue, keys):
    queue.enqueue(keys)
    return queue

def make_projection_head(recipe, embedding_dim, seed=0):
    """
    Identity for v1; a two-layer MLP with hidden width embedding_dim for
    v2.
    """
    if recipe == "v1":
        return nn.Identity()
    head = nn.Sequential(nn.Linear(embedding_dim, embedding_dim), nn.ReLU(),
                         nn.Linear(embedding_dim, embedding_dim))
    return tensor_nn.init_weights(head, base.derive_seed(seed, "head"))

class Query_model(nn.Module):
    """
    An encoder followed by a projection head; outputs unit-norm rows.
    """

    def __init__(self, encoder, head):
        super(Query_model, self).__init__()
        self.encoder = encoder
        self.head = head
        return

    def forward(self, batch):
        return tensor_nn.l2_normalize(self.head(tensor_nn.forward(
            self.encoder, batch)))

class Momentum_pair():
    """
    The query model and its momentum copy. The key model starts as an
    exact copy and never receives gradients.
    """

    def __init__(self, query, m=0.999):
        self.query = query
        self.key = copy.deepcopy(query)
        for param in self.key.parameters():
            param.requires_grad_(False)
        self.m = m
        return

def ema_update(target, source, m):
    """
    target <- m * target + (1 - m) * source, for every parameter.
    """
    with torch.no_grad():
        for target_param, source_param in zip(target.parameters(),
                                              source.parameters()):
            if target_param.shape != source_param.shape:
                raise base.Shape_error("EMA parameter shapes differ.")
            target_param.mul_(m).add_(source_param.detach(), alpha=1.0 - m)
    return target

def momentum_update(pair):
    ema_update(pair.key, pair.query, pair.m)
    return pair

def check_unit_norm(rows, name, tolerance=UNIT_NORM_TOLERANCE):
    norms = rows.detach().norm(dim=1)
    if rows.shape[0] > 0 \
            and float((norms - 1.0).abs().max()) > tolerance:
        raise base.Contract_error("{} rows are not unit-normalized."\
                                  .format(name))
    return

def info_nce_loss(q, k_pos, queue, temperature, check=False):
    """
    The InfoNCE loss: (K+1)-way softmax cross-entropy of each query
    against its positive key (index 0) and the queued negatives. The
    queue is treated as a constant.

    Parameters:
    -----------
    q, k_pos : torch.Tensor
        B x d, unit-norm rows.

    queue : torch.Tensor
        K x d, unit-norm rows.

    temperature : float
        Positive.

    check : bool, default False
        Verify unit norms and raise a Contract_error otherwise.
    """
    if temperature <= 0.0:
        raise base.Config_error("temperature must be positive.")
    if check:
        check_unit_norm(q, "query")
        check_unit_norm(k_pos, "positive key")
        check_unit_norm(queue, "queue")
    positive = (q * k_pos).sum(dim=1, keepdim=True)
    negative = q @ queue.detach().t().to(q.dtype)
    logits = torch.cat([positive, negative], dim=1) / temperature
    labels = torch.zeros(q.shape[0], dtype=torch.long)
    return F.cross_entropy(logits, labels)

def assert_no_gradients(module):
    """
    Raise a Contract_error if any parameter of a gradient-free model
    holds a nonzero gradient.
    """
    for name, param in module.named_parameters():
        if param.requires_grad or (param.grad is not None \
                                   and bool(param.grad.abs().sum() > 0)):
            raise base.Contract_error("Gradient reached {}".format(name))
    return

class Contrastive_state():
    """
    Everything a momentum-contrast run owns.
    """

    def __init__(self, config, encoder_config, seed=0, recipe_overrides=None):
        config.validate()
        self.config = config
        self.encoder_config = encoder_config
        self.seed = seed
        encoder = tensor_nn.build_encoder(encoder_config, seed)
        head = make_projection_head(config.recipe,
                                    encoder_config.embedding_dim, seed)
        self.pair = Momentum_pair(Query_model(encoder, head),
                                  config.key_momentum)
        self.queue = Negative_queue(config.queue_size,
                                    encoder_config.embedding_dim)
        self.optimizer = tensor_nn.make_sgd(self.pair.query.parameters(),
                                            config.sgd_config())
        self.factory = augment.View_factory(
            config.recipe, encoder_config.input_size,
            recipe_overrides=recipe_overrides)
        self.step = 0
        return

    def encoder(self):
        return self.pair.query.encoder

    def learning_rate(self):
        if self.config.schedule == "cosine":
            return tensor_nn.cosine_lr(self.step, self.config.total_steps,
                                       self.config.base_lr)
        return tensor_nn.step_lr(self.step, self.config.total_steps,
                                 self.config.base_lr)

    def checkpoint_tensors(self):
        tensors = tensor_nn.module_tensors(self.pair.query.encoder,
                                           "encoder.")
        tensors.update(tensor_nn.module_tensors(self.pair.query.head,
                                                "head."))
        tensors.update(tensor_nn.module_tensors(self.pair.key, "key."))
        tensors["queue.entries"] = self.queue.entries
        return tensors

def pretrain_views_step(views, state):
    """
    One step on pre-augmented views [queries, keys].

    While the queue is not yet full the step is a keys-only warmup: the
    key model embeds the batch, the keys are enqueued and no gradient
    step is taken; the return value is then (None, None).

    Returns:
    --------
    loss : float or None
    lr : float or None
    """
    query_views, key_views = views
    with torch.no_grad():
        keys = state.pair.key(key_views)
    if not state.queue.is_full():
        state.queue.enqueue(keys)
        return None, None

    queries = state.pair.query(query_views)
    loss = info_nce_loss(queries, keys, state.queue.negatives(),
                         state.config.temperature, check=state.config.debug)
    tensor_nn.backward(loss)
    if state.config.clip_norm > 0.0:
        tensor_nn.clip_gradients(state.pair.query.parameters(),
                                 state.config.clip_norm)
    lr = state.learning_rate()
    tensor_nn.sgd_step(state.optimizer, lr)
    momentum_update(state.pair)
    state.queue.enqueue(keys)
    if state.config.debug:
        assert_no_gradients(state.pair.key)
        for param in state.pair.query.parameters():
            tensor_nn.check_finite(param, "query parameter")
    state.step += 1
    return float(loss.detach()), lr

def pretrain_step(batch, state, draw):
    """
    Augment a batch of uint8 images into two views each (draw selects
    the generator streams) and take one pretraining step.
    """
    views = augment.make_batch_views(state.factory, batch, state.seed, draw)
    return pretrain_views_step(views, state)

class Training_pool():
    """
    The images a representation is pretrained on, with the record of
    each. Every drawn batch is checked against the allowed cities and
    the train split.

    Attributes:
    -----------
    images : numpy.ndarray
        N x S x S x 3 uint8.

    records : list
        Tile_record of every image.

    allowed_cities : set
        City names the representation may see.

    checked : int
        Number of images verified so far.

    lock : threading.Lock
        Guards checked; batches are drawn on prefetch threads.
    """

    def __init__(self, images, records, allowed_cities):
        if len(images) != len(records):
            raise base.Validation_error("images and records differ in "\
                                        "length.")
        if len(images) == 0:
            raise base.Config_error("The pretraining pool is empty.")
        self.images = images
        self.records = records
        self.allowed_cities = set(allowed_cities)
        self.checked = 0
        self.lock = threading.Lock()
        return

    def check(self, indices):
        for index in indices:
            record = self.records[index]
            if record.city_name not in self.allowed_cities \
                    or record.split != "train":
                raise base.Contract_error("Pretraining drew a {} tile of {}"\
                    ", outside the pretraining set.".format(
                        record.split, record.city_name))
        with self.lock:
            self.checked += len(indices)
        return

    def sample_indices(self, batch_size, seed, draw):
        """
        Return the pool indices of draw number `draw`: batch_size
        distinct images when the pool is large enough.
        """
        rng = augment.image_rng(base.derive_seed(seed, "batch"), draw, 0)
        replace = batch_size > len(self.images)
        indices = rng.choice(len(self.images), size=batch_size,
                             replace=replace)
        indices = [int(i) for i in indices]
        self.check(indices)
        return indices

def prefetch(make_batch, draws, num_workers, depth=PREFETCH_DEPTH):
    """
    Yield make_batch(draw) for every draw in order, computing up to depth
    batches ahead on num_workers threads. With num_workers 0 the batches
    are computed inline.
    """
    if num_workers <= 0:
        for draw in draws:
            yield make_batch(draw)
        return
    draws = iter(draws)
    with ThreadPoolExecutor(max_workers=num_workers) as executor:
        pending = collections.deque()
        for draw in itertools.islice(draws, depth):
            pending.append(executor.submit(make_batch, draw))
        while pending:
            future = pending.popleft()
            for draw in itertools.islice(draws, 1):
                pending.append(executor.submit(make_batch, draw))
            yield future.result()
    return

class Loss_log():
    """
    The training curve of a run, written as CSV with the columns
    step,loss,lr.
    """

    def __init__(self):
        self.rows = []
        return

    def append(self, step, loss, lr):
        self.rows.append({"step": step, "loss": loss, "lr": lr})
        return

    def losses(self):
        return [row["loss"] for row in self.rows]

    def save(self, csv_filename):
        directory = os.path.dirname(os.path.abspath(csv_filename))
        os.makedirs(directory, exist_ok=True)
        frame = pd.DataFrame(self.rows, columns=["step", "loss", "lr"])
        frame.to_csv(csv_filename, index=False, float_format="%.8g")
        return

def save_state_checkpoint(state, checkpoint_filename, workflow):
    header = {"workflow": workflow, "step": state.step,
              "encoder_config": tensor_nn.encoder_config_to_dict(
                  state.encoder_config),
              "encoder_checksum": tensor_nn.encoder_checksum(
                  state.encoder())}
    tensor_nn.save_checkpoint(checkpoint_filename,
                              state.checkpoint_tensors(), header)
    return

def run_training(state, pool, make_step, warmup_draws, workflow,
                 log_interval=100, num_workers=0, loss_filename=None,
                 checkpoint_filename=None, checkpoint_every=0):
    """
    Drive a pretraining state for its configured number of gradient
    steps.

    Parameters:
    -----------
    state : Contrastive_state or Distillation_state
        Owns the models, optimizer and step counter.

    pool : Training_pool
        The images batches are drawn from.

    make_step : callable
        make_step(views, state) -> (loss, lr), with loss None for warmup
        draws.

    warmup_draws : int
        Draws that are expected to be warmup only.

    Returns:
    --------
    log : Loss_log
    """
    total_steps = state.config.total_steps
    batch_size = state.config.batch_size
    total_draws = warmup_draws + total_steps
    log = Loss_log()

    def make_batch(draw):
        indices = pool.sample_indices(batch_size, state.seed, draw)
        return augment.make_batch_views(
            state.factory, [pool.images[i] for i in indices], state.seed,
            draw)

    for views in prefetch(make_batch, range(total_draws), num_workers):
        if state.step >= total_steps:
            break
        loss, lr = make_step(views, state)
        if loss is None:
            continue
        log.append(state.step, loss, lr)
        if log_interval > 0 and state.step % log_interval == 0:
            logger.info("%s step %d/%d loss %.4f lr %.5f", workflow,
                        state.step, total_steps, loss, lr)
        if checkpoint_filename is not None and checkpoint_every > 0 \
                and state.step % checkpoint_every == 0:
            save_state_checkpoint(state, checkpoint_filename, workflow)
            if loss_filename is not None:
                log.save(loss_filename)
    if state.step < total_steps:
        raise base.State_error("Training ended after {} of {} steps.".format(
            state.step, total_steps))
    if checkpoint_filename is not None:
        save_state_checkpoint(state, checkpoint_filename, workflow)
    if loss_filename is not None:
        log.save(loss_filename)
    logger.info("%s finished %d steps; %d pretraining images verified",
                workflow, total_steps, pool.checked)
    return log

def pretrain(config, encoder_config, pool, seed=0, recipe_overrides=None,
             log_interval=100, num_workers=0, loss_filename=None,
             checkpoint_filename=None, checkpoint_every=0):
    """
    Run one momentum-contrast pretraining: queue warmup followed by
    config.total_steps gradient steps.

    Returns:
    --------
    state : Contrastive_state
    log : Loss_log
    """
    state = Contrastive_state(config, encoder_config, seed, recipe_overrides)
    warmup_draws = config.queue_size // config.batch_size
    log = run_training(state, pool, pretrain_views_step, warmup_draws,
                       config.recipe, log_interval, num_workers,
                       loss_filename, checkpoint_filename, checkpoint_every)
    return state, log
