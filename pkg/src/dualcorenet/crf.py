"""Fully connected two-label CRF: mean-field inference and energy terms.

Pairwise kernels are Gaussian in pixel position (spatial) and in position
plus intensity (bilateral).  Messages are normalized by the total kernel mass
seen by each pixel, excluding the pixel itself.  The spatial kernel is
separable and is applied as two small matrix products per label; the
bilateral kernel is a dense N x N matrix, which bounds the field size this
module accepts (see :data:`MAX_DENSE_PIXELS`).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import Tensor, as_tensor, get_dtype, log, matmul, reshape, softmax, transpose

PROB_EPS = 1e-7
MAX_DENSE_PIXELS = 4096


@dataclass
class CrfConfig:
    iterations: int = 5
    spatial_theta: float = 3.0
    bilateral_theta_spatial: float = 30.0
    bilateral_theta_intensity: float = 0.1
    w_spatial: float = 1.0
    w_bilateral: float = 1.0
    compatibility: tuple = ((0.0, 1.0), (1.0, 0.0))
    pairwise_beta: float = 0.01
    resolution: str = "roi"  # "roi": CRF on the U-Net grid; "mask": after resize to mask size

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if int(self.iterations) < 1:
            raise ConfigError(f"crf iterations must be >= 1, got {self.iterations}")
        for name in ("spatial_theta", "bilateral_theta_spatial", "bilateral_theta_intensity"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"crf {name} must be > 0, got {getattr(self, name)}")
        if self.w_spatial < 0 or self.w_bilateral < 0:
            raise ConfigError("crf kernel weights must be non-negative")
        if self.resolution not in ("roi", "mask"):
            raise ConfigError(f"crf resolution must be 'roi' or 'mask', got {self.resolution!r}")
        mu = np.asarray(self.compatibility, dtype=float)
        if mu.shape != (2, 2):
            raise ConfigError(f"compatibility must be 2x2, got shape {mu.shape}")
        if mu[0, 0] > mu[0, 1] or mu[1, 1] > mu[1, 0]:
            warnings.warn("compatibility diagonal exceeds off-diagonal; not Potts-like", stacklevel=3)

    @property
    def mu(self) -> np.ndarray:
        return np.asarray(self.compatibility, dtype=float)

    def bilateral_spatial(self, h: int, w: int) -> float:
        """Bilateral position bandwidth in pixels of an ``h x w`` field.

        ``bilateral_theta_spatial`` is stated for a REFERENCE_FIELD-sized mask
        and shrinks in proportion on smaller grids.
        """
        return self.bilateral_theta_spatial * max(h, w) / REFERENCE_FIELD


REFERENCE_FIELD = 224


def _gaussian_1d(n: int, theta: float) -> np.ndarray:
    d = np.arange(n, dtype=float)
    return np.exp(-((d[:, None] - d[None, :]) ** 2) / (2 * theta ** 2))


def _positions(h: int, w: int) -> np.ndarray:
    ii, jj = np.meshgrid(np.arange(h, dtype=float), np.arange(w, dtype=float), indexing="ij")
    return np.stack([ii.reshape(-1), jj.reshape(-1)], axis=1)


def spatial_kernel_matrix(h: int, w: int, theta: float) -> np.ndarray:
    """Dense N x N spatial Gaussian (diagonal included); for oracles and energies."""
    pos = _positions(h, w)
    d2 = ((pos[:, None, :] - pos[None, :, :]) ** 2).sum(-1)
    return np.exp(-d2 / (2 * theta ** 2))


def bilateral_kernel_matrix(image: np.ndarray, theta_spatial: float, theta_intensity: float) -> np.ndarray:
    """Dense N x N bilateral Gaussian for one H x W image (diagonal included)."""
    h, w = image.shape
    pos = _positions(h, w)
    d2 = ((pos[:, None, :] - pos[None, :, :]) ** 2).sum(-1)
    iv = np.asarray(image, dtype=float).reshape(-1)
    di = (iv[:, None] - iv[None, :]) ** 2
    return np.exp(-d2 / (2 * theta_spatial ** 2) - di / (2 * theta_intensity ** 2))


def _as_batched(unary: Tensor, image) -> tuple[Tensor, np.ndarray, bool]:
    unary = as_tensor(unary)
    image = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=float)
    batched = unary.ndim == 4
    if not batched:
        unary = reshape(unary, (1,) + unary.shape)
        image = image[None]
    if unary.ndim != 4 or unary.shape[-1] != 2:
        raise ShapeError(f"unary field must be (..., H, W, 2), got {unary.shape}")
    if image.shape != unary.shape[:3]:
        raise ShapeError(f"image extents {image.shape} differ from unary extents {unary.shape[:3]}")
    return unary, image, batched


def mean_field_infer(unary, image, cfg: CrfConfig) -> Tensor:
    """Refine per-pixel label probabilities by mean-field iterations.

    ``unary`` is an (H, W, 2) or (B, H, W, 2) probability field and ``image`` the
    matching (B,) H x W intensities in [0, 1].  Each iteration computes
    normalized spatial and bilateral messages from the current estimate,
    applies the label compatibility and renormalizes
    ``softmax(log(unary) - pairwise)``.  Differentiable with respect to ``unary``.
    """
    unary, img, batched = _as_batched(unary, image)
    if cfg.w_spatial == 0 and cfg.w_bilateral == 0:
        out = unary
        return out if batched else reshape(out, out.shape[1:])

    b, h, w, _ = unary.shape
    n = h * w
    dtype = get_dtype()
    log_unary = log(unary, PROB_EPS)
    mu_t = Tensor(cfg.mu.T, dtype=dtype)

    gy = _gaussian_1d(h, cfg.spatial_theta)
    gx = _gaussian_1d(w, cfg.spatial_theta)
    spatial_norm = gy.sum(1)[:, None] * gx.sum(1)[None, :] - 1.0
    with np.errstate(divide="ignore"):
        inv_spatial = np.where(spatial_norm > 0, 1.0 / spatial_norm, 0.0)
    gy_t, gx_t = Tensor(gy, dtype=dtype), Tensor(gx, dtype=dtype)
    spatial_scale = Tensor((cfg.w_spatial * inv_spatial)[None, None], dtype=dtype)  # 1,1,H,W

    use_bilateral = cfg.w_bilateral > 0
    if use_bilateral:
        if n > MAX_DENSE_PIXELS:
            raise ConfigError(f"dense bilateral filtering limited to {MAX_DENSE_PIXELS} pixels, field has {n}")
        kb = np.stack([bilateral_kernel_matrix(im, cfg.bilateral_spatial(*im.shape), cfg.bilateral_theta_intensity)
                       for im in img])
        idx = np.arange(n)
        kb[:, idx, idx] = 0.0
        bnorm = kb.sum(-1, keepdims=True)
        with np.errstate(divide="ignore"):
            inv_b = np.where(bnorm > 0, 1.0 / bnorm, 0.0)
        kb_t = Tensor(kb, dtype=dtype)
        bil_scale = Tensor(cfg.w_bilateral * inv_b, dtype=dtype)  # B,N,1

    q = unary
    for _ in range(int(cfg.iterations)):
        msg = None
        if cfg.w_spatial > 0:
            qc = transpose(q, (0, 3, 1, 2))  # B,2,H,W
            filt = matmul(matmul(gy_t, qc), gx_t) - qc
            msg = reshape(transpose(filt * spatial_scale, (0, 2, 3, 1)), (b, n, 2))
        if use_bilateral:
            mb = matmul(kb_t, reshape(q, (b, n, 2))) * bil_scale
            msg = mb if msg is None else msg + mb
        pairwise = matmul(msg, mu_t)
        q = reshape(softmax(reshape(log_unary, (b, n, 2)) - pairwise, axis=-1), (b, h, w, 2))
    return q if batched else reshape(q, q.shape[1:])


def pairwise_energy(labels: np.ndarray, image: np.ndarray, cfg: CrfConfig) -> float:
    """``sum_{p<q} mu(y_p, y_q) k(f_p, f_q)`` with unnormalized kernels."""
    labels = np.asarray(labels).astype(int)
    h, w = labels.shape
    if h * w > MAX_DENSE_PIXELS:
        raise ConfigError(f"pairwise energy limited to {MAX_DENSE_PIXELS} pixels, field has {h * w}")
    k = np.zeros((h * w, h * w))
    if cfg.w_spatial:
        k += cfg.w_spatial * spatial_kernel_matrix(h, w, cfg.spatial_theta)
    if cfg.w_bilateral:
        image = np.asarray(image, dtype=float)
        k += cfg.w_bilateral * bilateral_kernel_matrix(image, cfg.bilateral_spatial(h, w), cfg.bilateral_theta_intensity)
    y = labels.reshape(-1)
    compat = cfg.mu[y[:, None], y[None, :]]
    return float(np.triu(compat * k, 1).sum())


def true_label_logprob(probs, labels) -> Tensor:
    """Sum over pixels of ``log max(p(true label), eps)``; ``probs`` is (..., H, W, 2)."""
    probs = as_tensor(probs)
    lab = np.asarray(labels.data if isinstance(labels, Tensor) else labels)
    if probs.shape[:-1] != lab.shape:
        raise ShapeError(f"label extents {lab.shape} differ from probability extents {probs.shape[:-1]}")
    onehot = np.stack([1 - lab, lab], axis=-1).astype(probs.dtype)
    p_true = (probs * Tensor(onehot, dtype=probs.dtype)).sum(axis=-1)
    return log(p_true, PROB_EPS).sum()


def crf_energy_terms(mask_probs, labels, image, cfg: CrfConfig) -> tuple[Tensor, float]:
    """Unary term (sum of true-label log-probabilities, <= 0) and pairwise energy of ``labels``."""
    unary_term = true_label_logprob(mask_probs, labels)
    lab = np.asarray(labels)
    img = np.asarray(image.data if isinstance(image, Tensor) else image)
    if lab.ndim == 2:
        pairwise = pairwise_energy(lab, img, cfg)
    else:
        pairwise = float(sum(pairwise_energy(lb, im, cfg) for lb, im in zip(lab, img)))
    return unary_term, pairwise


def cross_entropy_map(probs, labels) -> Tensor:
    """Mean over pixels (and batch) of ``-log p(true label)``."""
    lab = np.asarray(labels)
    return -true_label_logprob(probs, lab) / float(lab.size)


def segmentation_loss(unet_probs, crf_probs, labels, image, cfg: CrfConfig, lam: float = 0.67) -> Tensor:
    """``(1-lam) CE(unet) + lam CE(crf) + lam beta E_pair(labels)/pixels``.

    Cross-entropies are per-pixel means; the pairwise energy of the reference
    labels is divided by the pixel count so the three terms share a scale.
    """
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"lambda must lie in [0, 1], got {lam}")
    lab = np.asarray(labels)
    ce_unet = cross_entropy_map(unet_probs, lab)
    if lam == 0.0:
        return ce_unet
    ce_crf = cross_entropy_map(crf_probs, lab)
    loss = (1.0 - lam) * ce_unet + lam * ce_crf
    if cfg.pairwise_beta:
        _, pair = crf_energy_terms(crf_probs, lab, image, cfg)
        loss = loss + lam * cfg.pairwise_beta * pair / float(lab.size)
    return loss
