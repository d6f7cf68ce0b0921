"""
augment.py

Stochastic augmentation of tiles into the views that pretraining
compares: the two-view V1 and V2 recipes and the DINO multi-crop set.

Images are torch float tensors of shape (height, width, 3) with values in
[0,1]. Every random choice is drawn from a numpy Generator passed in by
the caller, so a pipeline is a pure function of (image, generator state).
Resampling is bilinear without an antialiasing filter.
"""

import math
import logging

import numpy as np
import torch
import torch.nn.functional as F
import torchvision.transforms.functional as TF
from torchvision.transforms import InterpolationMode

import cityssl.modules.common_base as base

logger = logging.getLogger(__name__)

RECIPES = ("v1", "v2", "dino_global", "dino_local")
CROP_ATTEMPTS = 10
MIN_CROP_INPUT = 8
ASPECT_RANGE = (3.0/4.0, 4.0/3.0)
LUMA_WEIGHTS = (0.299, 0.587, 0.114)
COLOR_OPS = ("brightness", "contrast", "saturation", "hue")

def image_rng(seed, step, index):
    """
    Return the generator of one image at one step. Streams for distinct
    (step, index) pairs are independent, so a batch can be augmented in
    any order or in parallel with identical results.
    """
    bit_generator = np.random.Philox(key=int(seed) % 2**64,
                                     counter=[0, 0, int(step), int(index)])
    return np.random.Generator(bit_generator)

def to_image(array):
    """
    Convert a uint8 HxWx3 array to a float image in [0,1].
    """
    if isinstance(array, torch.Tensor):
        return array.float()
    return torch.from_numpy(np.ascontiguousarray(array)).float() / 255.0

def _to_chw(img):
    return img.permute(2, 0, 1)

def _to_hwc(img):
    return img.permute(1, 2, 0).contiguous()

def crop_params(height, width, scale_range, rng, ratio_range=ASPECT_RANGE):
    """
    Choose (top, left, crop_height, crop_width) covering a random area
    fraction in scale_range with a log-uniform aspect ratio in
    ratio_range. After CROP_ATTEMPTS failed draws, fall back to the
    largest centered crop with a clamped aspect ratio.
    """
    area = height * width
    log_ratio = (math.log(ratio_range[0]), math.log(ratio_range[1]))
    for attempt in range(CROP_ATTEMPTS):
        target_area = area * rng.uniform(scale_range[0], scale_range[1])
        aspect = math.exp(rng.uniform(log_ratio[0], log_ratio[1]))
        crop_width = int(round(math.sqrt(target_area * aspect)))
        crop_height = int(round(math.sqrt(target_area / aspect)))
        if 0 < crop_width <= width and 0 < crop_height <= height:
            top = int(rng.integers(0, height - crop_height + 1))
            left = int(rng.integers(0, width - crop_width + 1))
            return top, left, crop_height, crop_width

    in_ratio = float(width) / float(height)
    if in_ratio < ratio_range[0]:
        crop_width = width
        crop_height = int(round(crop_width / ratio_range[0]))
    elif in_ratio > ratio_range[1]:
        crop_height = height
        crop_width = int(round(crop_height * ratio_range[1]))
    else:
        crop_width = width
        crop_height = height
    top = (height - crop_height) // 2
    left = (width - crop_width) // 2
    return top, left, crop_height, crop_width

def random_resized_crop(img, scale_range, out_px, rng,
                        ratio_range=ASPECT_RANGE):
    """
    Crop a random region and resize it bilinearly to out_px x out_px.
    """
    height, width = img.shape[0], img.shape[1]
    if height < MIN_CROP_INPUT or width < MIN_CROP_INPUT:
        raise base.Validation_error("Images must be at least {0}x{0} to "\
                                    "crop.".format(MIN_CROP_INPUT))
    if not 0.0 < scale_range[0] <= scale_range[1] <= 1.0:
        raise base.Validation_error("scale_range must lie within (0, 1].")
    top, left, crop_height, crop_width = crop_params(
        height, width, scale_range, rng, ratio_range)
    if (crop_height, crop_width) == (height, width) \
            and (height, width) == (out_px, out_px):
        return img.clone()
    cropped = TF.resized_crop(
        _to_chw(img), top, left, crop_height, crop_width, [out_px, out_px],
        interpolation=InterpolationMode.BILINEAR, antialias=False)
    return _to_hwc(cropped).clamp(0.0, 1.0)

def apply_color_op(img, kind, factor):
    """
    Apply one color perturbation with a fixed factor: multiplicative for
    brightness, contrast and saturation, additive hue shift for hue.
    """
    chw = _to_chw(img)
    if kind == "brightness":
        chw = TF.adjust_brightness(chw, factor)
    elif kind == "contrast":
        chw = TF.adjust_contrast(chw, factor)
    elif kind == "saturation":
        chw = TF.adjust_saturation(chw, factor)
    elif kind == "hue":
        chw = TF.adjust_hue(chw, factor)
    else:
        raise base.Config_error("Unknown color operation: {}".format(kind))
    return _to_hwc(chw).clamp(0.0, 1.0)

def color_jitter(img, brightness, contrast, saturation, hue, rng):
    """
    Apply the four color perturbations in a random order. Factors are
    drawn uniformly from [max(0, 1-s), 1+s]; the hue shift from [-h, h].
    An operation with strength 0 is skipped.
    """
    strengths = {"brightness": brightness, "contrast": contrast,
                 "saturation": saturation, "hue": hue}
    for kind, strength in strengths.items():
        if strength < 0.0:
            raise base.Validation_error("Jitter strengths must be "\
                                        "nonnegative.")
    if hue > 0.5:
        raise base.Validation_error("The hue strength must be at most 0.5.")
    order = rng.permutation(len(COLOR_OPS))
    for op_index in order:
        kind = COLOR_OPS[op_index]
        strength = strengths[kind]
        if strength == 0.0:
            continue
        if kind == "hue":
            factor = rng.uniform(-strength, strength)
        else:
            factor = rng.uniform(max(0.0, 1.0 - strength), 1.0 + strength)
        img = apply_color_op(img, kind, float(factor))
    return img.clamp(0.0, 1.0)

def grayscale(img):
    """
    Replace every channel by the luma 0.299 R + 0.587 G + 0.114 B.
    """
    luma = LUMA_WEIGHTS[0] * img[:, :, 0] + LUMA_WEIGHTS[1] * img[:, :, 1] \
        + LUMA_WEIGHTS[2] * img[:, :, 2]
    return luma.unsqueeze(2).expand(-1, -1, 3).contiguous()

def random_grayscale(img, p, rng):
    if not 0.0 <= p <= 1.0:
        raise base.Validation_error("p must lie in [0, 1].")
    if rng.uniform() < p:
        return grayscale(img)
    return img

def blur_kernel(sigma):
    radius = int(math.ceil(3.0 * sigma))
    x = torch.arange(-radius, radius + 1, dtype=torch.float64)
    kernel = torch.exp(-x**2 / (2.0 * sigma**2))
    return (kernel / kernel.sum()).float(), radius

def apply_gaussian_blur(img, sigma):
    """
    Separable Gaussian blur with kernel radius ceil(3 sigma) and
    replicated edges.
    """
    kernel, radius = blur_kernel(sigma)
    x = _to_chw(img).unsqueeze(0)
    x = F.pad(x, (radius, radius, radius, radius), mode="replicate")
    horizontal = kernel.view(1, 1, 1, -1).repeat(3, 1, 1, 1)
    vertical = kernel.view(1, 1, -1, 1).repeat(3, 1, 1, 1)
    x = F.conv2d(x, horizontal.to(x.dtype), groups=3)
    x = F.conv2d(x, vertical.to(x.dtype), groups=3)
    return _to_hwc(x[0]).clamp(0.0, 1.0)

def gaussian_blur(img, sigma_range, rng):
    if not 0.0 < sigma_range[0] <= sigma_range[1] <= 5.0:
        raise base.Validation_error("sigma_range must lie within (0, 5].")
    sigma = rng.uniform(sigma_range[0], sigma_range[1])
    return apply_gaussian_blur(img, float(sigma))

def solarize(img, threshold=0.5):
    return torch.where(img >= threshold, 1.0 - img, img)

class Augmentation_pipeline():
    """
    One augmentation recipe. Operations run in a fixed order: crop,
    horizontal flip, vertical flip, color jitter, grayscale, blur,
    solarize. Every parameter can be overridden from an
    "[augment.<recipe>]" config section.
    """

    def __init__(self, recipe, output_size):
        if recipe not in RECIPES:
            raise base.Config_error("Unknown augmentation recipe: {}".format(
                recipe))
        self.recipe = recipe
        self.output_size = output_size
        self.crop_scale_min = 0.2
        self.crop_scale_max = 1.0
        self.hflip_p = 0.5
        self.vflip_p = 0.0
        self.jitter_p = 1.0
        self.brightness = 0.4
        self.contrast = 0.4
        self.saturation = 0.4
        self.hue = 0.4
        self.grayscale_p = 0.2
        self.blur_p = 0.0
        self.blur_sigma_min = 0.1
        self.blur_sigma_max = 2.0
        self.solarize_p = 0.0
        return

    def ops(self):
        """
        Return the pipeline as an ordered list of (kind, parameters,
        probability).
        """
        return [
            ("random_resized_crop", {"scale": (self.crop_scale_min,
                                               self.crop_scale_max),
                                     "size": self.output_size}, 1.0),
            ("hflip", {}, self.hflip_p),
            ("vflip", {}, self.vflip_p),
            ("color_jitter", {"brightness": self.brightness,
                              "contrast": self.contrast,
                              "saturation": self.saturation,
                              "hue": self.hue}, self.jitter_p),
            ("grayscale", {}, self.grayscale_p),
            ("gaussian_blur", {"sigma": (self.blur_sigma_min,
                                         self.blur_sigma_max)}, self.blur_p),
            ("solarize", {"threshold": 0.5}, self.solarize_p),
        ]

    def validate(self):
        for kind, params, probability in self.ops():
            if not 0.0 <= probability <= 1.0:
                raise base.Config_error("Probability of {} must lie in "\
                                        "[0, 1].".format(kind))
        if self.output_size < 1:
            raise base.Config_error("output_size must be positive.")
        if not 0.0 < self.crop_scale_min <= self.crop_scale_max <= 1.0:
            raise base.Config_error("Crop scales must lie within (0, 1].")
        if not 0.0 < self.blur_sigma_min <= self.blur_sigma_max <= 5.0:
            raise base.Config_error("Blur sigmas must lie within (0, 5].")
        return

    def apply(self, img, rng):
        """
        Augment one image. Every probability is tested with a draw from
        rng, including those that are 0 or 1.
        """
        img = random_resized_crop(
            img, (self.crop_scale_min, self.crop_scale_max),
            self.output_size, rng)
        if rng.uniform() < self.hflip_p:
            img = img.flip(1)
        if rng.uniform() < self.vflip_p:
            img = img.flip(0)
        if rng.uniform() < self.jitter_p:
            img = color_jitter(img, self.brightness, self.contrast,
                               self.saturation, self.hue, rng)
        img = random_grayscale(img, self.grayscale_p, rng)
        if rng.uniform() < self.blur_p:
            img = gaussian_blur(img, (self.blur_sigma_min,
                                      self.blur_sigma_max), rng)
        if rng.uniform() < self.solarize_p:
            img = solarize(img)
        return img.contiguous()

def make_pipeline(recipe, input_size, local_size=None, overrides=None):
    """
    Build the pipeline of a named recipe for a given crop size.

    Parameters:
    -----------
    recipe : str
        "v1", "v2", "dino_global" or "dino_local".

    input_size : int
        Output size of two-view and global crops.

    local_size : int or None
        Output size of local crops; defaults to input_size // 2.

    overrides : dict or None
        Parameter -> value string entries from the config file.
    """
    if recipe == "dino_local":
        if local_size is None:
            local_size = input_size // 2
        pipeline = Augmentation_pipeline(recipe, local_size)
    else:
        pipeline = Augmentation_pipeline(recipe, input_size)
    if recipe == "v2":
        pipeline.jitter_p = 0.8
        pipeline.hue = 0.1
        pipeline.blur_p = 0.5
    elif recipe == "dino_global":
        pipeline.crop_scale_min = 0.4
        pipeline.jitter_p = 0.8
        pipeline.saturation = 0.2
        pipeline.hue = 0.1
        pipeline.blur_p = 1.0
    elif recipe == "dino_local":
        pipeline.crop_scale_min = 0.05
        pipeline.crop_scale_max = 0.4
        pipeline.jitter_p = 0.8
        pipeline.saturation = 0.2
        pipeline.hue = 0.1
        pipeline.blur_p = 0.5
    if overrides is not None:
        base.apply_settings(pipeline, overrides)
    pipeline.validate()
    return pipeline

class Multi_crop_set():
    """
    The views of one image for self-distillation: global crops first,
    then local crops.
    """

    def __init__(self, global_crops, local_crops):
        self.global_crops = list(global_crops)
        self.local_crops = list(local_crops)
        return

    def all_crops(self):
        return self.global_crops + self.local_crops

class View_factory():
    """
    Holds the pipelines of one workflow and produces its views.

    For DINO the second global crop is blurred less often and may be
    solarized.
    """

    def __init__(self, workflow, input_size, local_crops=4, local_size=None,
                 recipe_overrides=None):
        if recipe_overrides is None:
            recipe_overrides = {}
        self.workflow = workflow
        self.local_crops = local_crops
        if workflow in ["v1", "v2"]:
            self.pipelines = [make_pipeline(
                workflow, input_size, overrides=recipe_overrides.get(
                    workflow))]
        elif workflow == "dino":
            first = make_pipeline("dino_global", input_size,
                                  overrides=recipe_overrides.get(
                                      "dino_global"))
            second = make_pipeline("dino_global", input_size,
                                   overrides=recipe_overrides.get(
                                       "dino_global"))
            second.blur_p = 0.1
            second.solarize_p = 0.2
            local = make_pipeline("dino_local", input_size, local_size,
                                  overrides=recipe_overrides.get(
                                      "dino_local"))
            self.pipelines = [first, second, local]
        else:
            raise base.Config_error("Workflow {} has no augmentation "\
                                    "views.".format(workflow))
        return

    def make_views(self, img, rng):
        if self.workflow in ["v1", "v2"]:
            pipeline = self.pipelines[0]
            return pipeline.apply(img, rng), pipeline.apply(img, rng)
        first, second, local = self.pipelines
        global_crops = [first.apply(img, rng), second.apply(img, rng)]
        local_crops = [local.apply(img, rng) \
                       for i in range(self.local_crops)]
        return Multi_crop_set(global_crops, local_crops)

def make_views(img, recipe, rng, input_size=None, local_crops=4,
               recipe_overrides=None):
    """
    Produce the views of one image: a pair for "v1" and "v2", a
    Multi_crop_set for "dino". Two calls with generators in the same
    state give identical views.
    """
    if not isinstance(img, torch.Tensor):
        img = to_image(img)
    if input_size is None:
        input_size = min(img.shape[0], img.shape[1])
    factory = View_factory(recipe, input_size, local_crops=local_crops,
                           recipe_overrides=recipe_overrides)
    return factory.make_views(img, rng)

def make_batch_views(factory, images, seed, step):
    """
    Augment a batch. Image i at a given step always draws from the same
    generator stream.

    Returns:
    --------
    views : list of torch.Tensor
        For two-view workflows, [queries, keys], each B x S x S x 3. For
        DINO, one batch per crop: global crops first.
    """
    per_image = []
    for index, image in enumerate(images):
        per_image.append(factory.make_views(to_image(image),
                                            image_rng(seed, step, index)))
    if factory.workflow in ["v1", "v2"]:
        return [torch.stack([views[0] for views in per_image]),
                torch.stack([views[1] for views in per_image])]
    num_crops = len(per_image[0].all_crops())
    return [torch.stack([views.all_crops()[i] for views in per_image]) \
            for i in range(num_crops)]
