"""The dual-path network: texture path, segmentation path and fused classifier.

Two named presets exist.  ``paper`` carries the published layer sizes and is
only practical for shape tracing; ``desk`` shrinks inputs (32x32 context ROI,
16x16 bounding-box ROI) and divides channel widths by 16 so the whole network
trains on a CPU in minutes while keeping every shape ratio.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .conv import global_avg_pool, nearest_index, resize_nearest
from .crf import PROB_EPS, CrfConfig, mean_field_infer, segmentation_loss
from .errors import ConfigError, ShapeError
from .layers import (
    RESIDUAL_GAIN, NetworkParams, ParamSpec, conv_specs, dense, dense_specs, init_params, sconv_block, sconv_block_specs,
    unet_block_specs, unet_down, unet_up,
)
from .conv import conv2d
from .tensor import Tensor, as_tensor, concat, dropout, exp, log, mul, reshape, sigmoid, square, transpose


@dataclass
class NetworkConfig:
    preset: str = "desk"
    in_channels: int = 3
    context_size: int = 32
    bbox_size: int = 16
    mask_size: int = 32
    lpl_widths: tuple = (8, 16, 46)
    lpl_middle_blocks: int = 8
    lpl_kernel: int = 3
    cgl_widths: tuple = (4, 8, 16, 32)
    cgl_head_widths: tuple = (4, 8, 16)
    cgl_head_kernel: int = 7
    cgl_head_input: str = "mask"  # "mask", "masked_image" or "both"
    dense_units: int = 128
    dropout: float = 0.5

    def __post_init__(self):
        self.lpl_widths = tuple(int(v) for v in self.lpl_widths)
        self.cgl_widths = tuple(int(v) for v in self.cgl_widths)
        self.cgl_head_widths = tuple(int(v) for v in self.cgl_head_widths)
        self.validate()

    def validate(self) -> None:
        if len(self.lpl_widths) != 3:
            raise ConfigError("lpl_widths needs three entries")
        if len(self.cgl_widths) != 4:
            raise ConfigError("cgl_widths needs four entries")
        if self.context_size % 8:
            raise ConfigError(f"context_size {self.context_size} must be divisible by 8")
        if self.bbox_size % 8:
            raise ConfigError(f"bbox_size {self.bbox_size} must be divisible by 8")
        if self.mask_size % (2 ** len(self.cgl_head_widths)):
            raise ConfigError(f"mask_size {self.mask_size} must be divisible by {2 ** len(self.cgl_head_widths)}")
        if not 0 <= self.dropout < 1:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.cgl_head_input not in ("mask", "masked_image", "both"):
            raise ConfigError(f"unknown cgl_head_input {self.cgl_head_input!r}")
        for k in (self.lpl_kernel, self.cgl_head_kernel):
            if k % 2 == 0:
                raise ConfigError(f"kernel sizes must be odd, got {k}")

    @property
    def cgl_head_channels(self) -> int:
        return {"mask": 2, "masked_image": 1, "both": 3}[self.cgl_head_input]


PAPER = dict(preset="paper", in_channels=3, context_size=224, bbox_size=40, mask_size=224,
             lpl_widths=(128, 256, 728), lpl_middle_blocks=8, cgl_widths=(16, 32, 64, 128),
             cgl_head_widths=(32, 64, 128), dense_units=2048, dropout=0.5)


def _shrink(width: int, divisor: int = 16) -> int:
    return max(1, math.ceil(width / divisor))


DESK = dict(preset="desk", in_channels=3, context_size=32, bbox_size=16, mask_size=32,
            lpl_widths=tuple(_shrink(w) for w in PAPER["lpl_widths"]), lpl_middle_blocks=8,
            cgl_widths=tuple(_shrink(w) for w in PAPER["cgl_widths"]),
            cgl_head_widths=tuple(_shrink(w) for w in PAPER["cgl_head_widths"]),
            dense_units=_shrink(PAPER["dense_units"]), dropout=0.5)

PRESETS = {"paper": PAPER, "desk": DESK}


def network_config(preset: str = "desk", **overrides) -> NetworkConfig:
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    values = dict(PRESETS[preset])
    values.update(overrides)
    return NetworkConfig(**values)


# -- parameter declaration --------------------------------------------------------

def lpl_specs(cfg: NetworkConfig) -> list[ParamSpec]:
    specs, cin = [], cfg.in_channels
    for i, cout in enumerate(cfg.lpl_widths):
        specs += sconv_block_specs(f"lpl.block{i + 1}", cin, cout, cfg.lpl_kernel, pool=True)
        cin = cout
    for j in range(cfg.lpl_middle_blocks):
        specs += sconv_block_specs(f"lpl.block{j + 4}", cin, cin, cfg.lpl_kernel, pool=False)
    specs += dense_specs("lpl.fc", cin, cfg.dense_units)
    specs += dense_specs("lpl.head", cfg.dense_units, 2, RESIDUAL_GAIN)
    return specs


def cgl_unet_specs(cfg: NetworkConfig) -> list[ParamSpec]:
    specs, cin = [], 1
    for i, cout in enumerate(cfg.cgl_widths):
        specs += unet_block_specs(f"cgl_unet.down{i + 1}", cin, cout)
        cin = cout
    widths = cfg.cgl_widths
    for i in range(3):
        skip = widths[2 - i]
        specs += unet_block_specs(f"cgl_unet.up{i + 1}", cin + skip, skip)
        cin = skip
    specs += conv_specs("cgl_unet.out", cin, 1, 1, 0.0)
    return specs


def cgl_head_specs(cfg: NetworkConfig) -> list[ParamSpec]:
    specs, cin = [], cfg.cgl_head_channels
    for i, cout in enumerate(cfg.cgl_head_widths):
        specs += sconv_block_specs(f"cgl_head.block{i + 1}", cin, cout, cfg.cgl_head_kernel, pool=True)
        cin = cout
    specs += dense_specs("cgl_head.fc", cin, cfg.dense_units)
    specs += dense_specs("cgl_head.head", cfg.dense_units, 2, RESIDUAL_GAIN)
    return specs


def fusion_specs(cfg: NetworkConfig) -> list[ParamSpec]:
    return dense_specs("fusion.head", 2 * cfg.dense_units, 2, RESIDUAL_GAIN)


GROUPS = ("lpl", "cgl_unet", "cgl_head", "fusion")


def network_specs(cfg: NetworkConfig) -> list[ParamSpec]:
    return lpl_specs(cfg) + cgl_unet_specs(cfg) + cgl_head_specs(cfg) + fusion_specs(cfg)


def init_network(cfg: NetworkConfig, rng: np.random.Generator) -> NetworkParams:
    return init_params(network_specs(cfg), rng)


# -- forward ----------------------------------------------------------------------

class ForwardOutputs(NamedTuple):
    class_probs: Tensor      # fused, (B, 2)
    soft_mask: Tensor        # (B, mask, mask, 2)
    lpl_features: Tensor     # (B, dense_units)
    cgl_features: Tensor     # (B, dense_units)
    lpl_probs: Tensor
    cgl_probs: Tensor
    unet_probs: Tensor       # (B, bbox, bbox, 2) before CRF
    crf_probs: Tensor        # CRF output on its own grid


def _as_nchw(x) -> Tensor:
    x = as_tensor(x)
    return reshape(x, (x.shape[0], 1) + x.shape[1:]) if x.ndim == 3 else x


STANDARDIZE_EPS = 1e-6


def standardize(x: Tensor) -> Tensor:
    """Per-sample zero mean, unit spread over (C, H, W).

    Keeps the first ReLU layers fed with both signs; narrow stems fed raw
    non-negative intensities can start with every unit switched off.
    """
    axes = tuple(range(1, x.ndim))
    centred = x - x.mean(axis=axes, keepdims=True)
    var = square(centred).mean(axis=axes, keepdims=True)
    return centred * exp(log(var + STANDARDIZE_EPS) * -0.5)


def lpl_forward(context_roi, params: NetworkParams, cfg: NetworkConfig, train_mode: bool = False,
                rng: np.random.Generator | None = None, trace: list | None = None) -> tuple[Tensor, Tensor]:
    """Texture path on (B, C, S, S) context ROIs -> (probs (B, 2), features)."""
    x = as_tensor(context_roi)
    if x.ndim != 4 or x.shape[2:] != (cfg.context_size, cfg.context_size):
        raise ShapeError(f"LPL input must be (B, C, {cfg.context_size}, {cfg.context_size}), got {x.shape}")
    if x.shape[1] != cfg.in_channels:
        raise ShapeError(f"LPL input has {x.shape[1]} channels, config expects {cfg.in_channels}")
    x = standardize(x)
    for i in range(3):
        x = sconv_block(x, params, f"lpl.block{i + 1}", pool=True)
        if trace is not None:
            trace.append(("lpl", f"block{i + 1}", x.shape))
    for j in range(cfg.lpl_middle_blocks):
        x = sconv_block(x, params, f"lpl.block{j + 4}", pool=False)
        if trace is not None:
            trace.append(("lpl", f"block{j + 4}", x.shape))
    feats = dense(global_avg_pool(x), params, "lpl.fc", "relu")
    feats = dropout(feats, cfg.dropout, rng, train_mode)
    probs = dense(feats, params, "lpl.head", "softmax")
    return probs, feats


def unet_forward(bbox_roi, params: NetworkParams, cfg: NetworkConfig, trace: list | None = None) -> Tensor:
    """Residual U-Net on (B, 1, b, b) -> foreground probability (B, b, b, 2)."""
    x = _as_nchw(bbox_roi)
    if x.shape[1:] != (1, cfg.bbox_size, cfg.bbox_size):
        raise ShapeError(f"CGL input must be (B, 1, {cfg.bbox_size}, {cfg.bbox_size}), got {x.shape}")
    x = standardize(x)
    skips = []
    for i in range(3):
        skip, x = unet_down(x, params, f"cgl_unet.down{i + 1}")
        skips.append(skip)
        if trace is not None:
            trace.append(("cgl", f"down{i + 1}", skip.shape))
    x, _ = unet_down(x, params, "cgl_unet.down4", pool=False)
    if trace is not None:
        trace.append(("cgl", "down4", x.shape))
    for i in range(3):
        x = unet_up(x, skips[2 - i], params, f"cgl_unet.up{i + 1}")
        if trace is not None:
            trace.append(("cgl", f"up{i + 1}", x.shape))
    logit = conv2d(x, params["cgl_unet.out.weight"], 1, "same", params["cgl_unet.out.bias"])
    fg = sigmoid(transpose(logit, (0, 2, 3, 1)))  # B,b,b,1
    return concat([1.0 - fg, fg], axis=-1)


def _resize_field(field: Tensor, size: int) -> Tensor:
    return resize_nearest(field, size, size, axes=(1, 2))


def downsample_labels(mask: np.ndarray, size: int) -> np.ndarray:
    """Sample a (B,) S x S mask at the centres of a size x size grid."""
    mask = np.asarray(mask)
    s = mask.shape[-1]
    idx = ((2 * np.arange(size) + 1) * s) // (2 * size)
    return mask[..., idx, :][..., idx]


def segment_forward(bbox_roi, params: NetworkParams, cfg: NetworkConfig, crf_cfg: CrfConfig,
                    trace: list | None = None) -> dict:
    """U-Net probabilities, CRF refinement and the mask resized to ``mask_size``."""
    x = _as_nchw(bbox_roi)
    unet_probs = unet_forward(x, params, cfg, trace)
    image = x.data[:, 0]
    if crf_cfg.resolution == "roi":
        crf_probs = mean_field_infer(unet_probs, image, crf_cfg)
        soft_mask = _resize_field(crf_probs, cfg.mask_size)
    else:
        idx = nearest_index(cfg.bbox_size, cfg.mask_size)
        crf_probs = mean_field_infer(_resize_field(unet_probs, cfg.mask_size), image[:, idx][:, :, idx], crf_cfg)
        soft_mask = crf_probs
    return {"unet_probs": unet_probs, "crf_probs": crf_probs, "soft_mask": soft_mask}


def cgl_forward(bbox_roi, params: NetworkParams, cfg: NetworkConfig, crf_cfg: CrfConfig,
                train_mode: bool = False, rng: np.random.Generator | None = None,
                trace: list | None = None) -> dict:
    """Segmentation path: U-Net, CRF refinement, resized mask and shape classifier.

    Returns a dict with ``probs``, ``features``, ``soft_mask`` (B, M, M, 2),
    ``unet_probs`` and ``crf_probs``.
    """
    x = _as_nchw(bbox_roi)
    seg = segment_forward(x, params, cfg, crf_cfg, trace)
    unet_probs, crf_probs, soft_mask = seg["unet_probs"], seg["crf_probs"], seg["soft_mask"]
    image = x.data[:, 0]

    head_in = transpose(soft_mask, (0, 3, 1, 2))  # B,2,M,M
    if cfg.cgl_head_input != "mask":
        idx = nearest_index(cfg.bbox_size, cfg.mask_size)
        img_up = Tensor(image[:, idx][:, :, idx][:, None], dtype=x.dtype)
        gated = mul(head_in[:, 1:2], img_up)
        head_in = gated if cfg.cgl_head_input == "masked_image" else concat([head_in, gated], axis=1)
    h = head_in
    for i in range(len(cfg.cgl_head_widths)):
        h = sconv_block(h, params, f"cgl_head.block{i + 1}", pool=True)
        if trace is not None:
            trace.append(("cgl_head", f"block{i + 1}", h.shape))
    feats = dense(global_avg_pool(h), params, "cgl_head.fc", "relu")
    feats = dropout(feats, cfg.dropout, rng, train_mode)
    probs = dense(feats, params, "cgl_head.head", "softmax")
    return {"probs": probs, "features": feats, "soft_mask": soft_mask,
            "unet_probs": unet_probs, "crf_probs": crf_probs}


def fused_forward(context_roi, bbox_roi, params: NetworkParams, cfg: NetworkConfig, crf_cfg: CrfConfig,
                  train_mode: bool = False, rng: np.random.Generator | None = None,
                  zero_cgl_features: bool = False, trace: list | None = None) -> ForwardOutputs:
    """Both paths plus the classifier over their concatenated features."""
    lpl_probs, lpl_feats = lpl_forward(context_roi, params, cfg, train_mode, rng, trace)
    cgl = cgl_forward(bbox_roi, params, cfg, crf_cfg, train_mode, rng, trace)
    cgl_feats = cgl["features"] * 0.0 if zero_cgl_features else cgl["features"]
    fused = dense(concat([lpl_feats, cgl_feats], axis=1), params, "fusion.head", "softmax")
    return ForwardOutputs(fused, cgl["soft_mask"], lpl_feats, cgl_feats, lpl_probs, cgl["probs"],
                          cgl["unet_probs"], cgl["crf_probs"])


# -- losses -----------------------------------------------------------------------

def class_nll(probs, labels) -> Tensor:
    """Batch mean of ``-log max(p(true class), 1e-7)``."""
    probs = as_tensor(probs)
    labels = np.asarray(labels, dtype=int).reshape(-1)
    if probs.ndim != 2 or probs.shape != (labels.size, 2):
        raise ShapeError(f"class probabilities {probs.shape} do not match {labels.size} labels")
    onehot = np.eye(2)[labels]
    p_true = (probs * Tensor(onehot, dtype=probs.dtype)).sum(axis=1)
    return -log(p_true, PROB_EPS).mean()


loss_lpl = class_nll
loss_cgl = class_nll
loss_joint = class_nll


def seg_loss_for_batch(out_unet: Tensor, out_crf: Tensor, mask_roi: np.ndarray, bbox_roi: np.ndarray,
                       cfg: NetworkConfig, crf_cfg: CrfConfig, lam: float) -> Tensor:
    """Segmentation loss on the CRF grid with reference labels sampled onto it."""
    grid = out_crf.shape[1]
    labels = downsample_labels(mask_roi, grid)
    image = np.asarray(bbox_roi)
    if image.ndim == 4:
        image = image[:, 0]
    if image.shape[-1] != grid:
        idx = nearest_index(image.shape[-1], grid)
        image = image[:, idx][:, :, idx]
    unet = out_unet if out_unet.shape[1] == grid else _resize_field(out_unet, grid)
    return segmentation_loss(unet, out_crf, labels, image, crf_cfg, lam)
