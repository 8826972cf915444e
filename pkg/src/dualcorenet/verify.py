"""Self-check suites run by ``dualcorenet verify``.

Each check yields a :class:`Check`; its ``line`` renders as
``PASS|FAIL <module>.<property> <detail>``.  The oracles here are written
independently of the production code paths: explicit per-pixel loops for the
CRF, pair enumeration for energies and AUC, finite differences for gradients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np
from scipy import ndimage

from . import conv, crf, layers, metrics, model, tensor
from .crf import PROB_EPS, CrfConfig
from .gradcheck import check_gradients
from .tensor import Tensor, make_rng, precision

GRAD_TOL = 1e-3
CRF_TOL = 1e-6
NORM_TOL = 1e-5
AUC_TOL = 1e-9
# Share of probed coordinates allowed to sit on a kink in the full-network check.
MAX_SKIPPED_FRACTION = 0.1


@dataclass
class Check:
    module: str
    prop: str
    passed: bool
    detail: str = ""

    @property
    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.module}.{self.prop} {self.detail}".rstrip()


# -- oracles ------------------------------------------------------------------------

def dense_mean_field_oracle(unary: np.ndarray, image: np.ndarray, cfg: CrfConfig) -> np.ndarray:
    """Mean field with explicit all-pairs loops over an (H, W, 2) field.

    Messages at pixel i are kernel-weighted averages of Q over all j != i,
    each kernel normalized by its total mass excluding i.
    """
    h, w, _ = unary.shape
    pix = [(r, c) for r in range(h) for c in range(w)]
    inten = np.asarray(image, dtype=float).reshape(-1)
    theta_b = cfg.bilateral_theta_spatial * max(h, w) / 224.0
    n = len(pix)
    ks = np.zeros((n, n))
    kb = np.zeros((n, n))
    for i, (ri, ci) in enumerate(pix):
        for j, (rj, cj) in enumerate(pix):
            if i == j:
                continue
            d2 = (ri - rj) ** 2 + (ci - cj) ** 2
            ks[i, j] = math.exp(-d2 / (2 * cfg.spatial_theta ** 2))
            kb[i, j] = math.exp(-d2 / (2 * theta_b ** 2)
                                - (inten[i] - inten[j]) ** 2 / (2 * cfg.bilateral_theta_intensity ** 2))
    mu = np.asarray(cfg.compatibility, dtype=float)
    logu = np.log(np.maximum(unary.reshape(n, 2).astype(float), PROB_EPS))
    q = unary.reshape(n, 2).astype(float)
    for _ in range(cfg.iterations):
        new = np.zeros_like(q)
        for i in range(n):
            msg = np.zeros(2)
            zs, zb = ks[i].sum(), kb[i].sum()
            for j in range(n):
                if zs > 0 and cfg.w_spatial:
                    msg += cfg.w_spatial * ks[i, j] / zs * q[j]
                if zb > 0 and cfg.w_bilateral:
                    msg += cfg.w_bilateral * kb[i, j] / zb * q[j]
            energy = logu[i] - np.array([sum(mu[l, m] * msg[m] for m in range(2)) for l in range(2)])
            e = np.exp(energy - energy.max())
            new[i] = e / e.sum()
        q = new
    return q.reshape(h, w, 2)


def pairwise_energy_oracle(labels: np.ndarray, image: np.ndarray, cfg: CrfConfig) -> float:
    """Sum over unordered pixel pairs of ``mu(y_p, y_q) * k(f_p, f_q)``."""
    h, w = labels.shape
    theta_b = cfg.bilateral_theta_spatial * max(h, w) / 224.0
    mu = np.asarray(cfg.compatibility, dtype=float)
    pix = [(r, c) for r in range(h) for c in range(w)]
    total = 0.0
    for a in range(len(pix)):
        for b in range(a + 1, len(pix)):
            (ra, ca), (rb, cb) = pix[a], pix[b]
            d2 = (ra - rb) ** 2 + (ca - cb) ** 2
            k = cfg.w_spatial * math.exp(-d2 / (2 * cfg.spatial_theta ** 2))
            di = (float(image[ra, ca]) - float(image[rb, cb])) ** 2
            k += cfg.w_bilateral * math.exp(-d2 / (2 * theta_b ** 2) - di / (2 * cfg.bilateral_theta_intensity ** 2))
            total += mu[int(labels[ra, ca]), int(labels[rb, cb])] * k
    return total


def pairwise_auc_oracle(scores, labels) -> float:
    """Fraction of (positive, negative) pairs ordered correctly, ties 1/2, by enumeration."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum(1.0 if p > q else 0.5 if p == q else 0.0 for p in pos for q in neg)
    return wins / (len(pos) * len(neg))


def composed_separable_oracle(x: np.ndarray, depth: np.ndarray, point: np.ndarray) -> np.ndarray:
    """Depthwise then pointwise convolution written as two plain conv2d calls."""
    c = x.shape[1]
    outs = [conv.conv2d(Tensor(x[:, i:i + 1]), Tensor(depth[i:i + 1])).data for i in range(c)]
    return conv.conv2d(Tensor(np.concatenate(outs, axis=1)), Tensor(point)).data


# -- helpers ------------------------------------------------------------------------

def kink_free(rng: np.random.Generator, shape, margin: float = 0.05) -> np.ndarray:
    """Values with magnitude in [margin, 1] and random sign."""
    mag = rng.uniform(margin, 1.0, size=shape)
    return np.where(rng.random(shape) < 0.5, -mag, mag)


def distinct_values(rng: np.random.Generator, shape, spacing: float = 0.05) -> np.ndarray:
    """A shuffled arithmetic sequence: no ties, every gap at least ``spacing``."""
    n = int(np.prod(shape))
    return (rng.permutation(n) * spacing - n * spacing / 2).reshape(shape)


def _weighted(out: Tensor, weights: np.ndarray) -> Tensor:
    return (out * Tensor(weights)).sum()


def _grad_case(name: str, build: Callable[[dict], Tensor], inputs: dict[str, np.ndarray], seed: int,
               max_coords: int | None = 12) -> Check:
    leaves = {k: Tensor(v, requires_grad=True, name=k) for k, v in inputs.items()}
    probe = build(leaves)
    weights = make_rng(seed, 99).standard_normal(probe.shape)
    errs = check_gradients(lambda: _weighted(build(leaves), weights), leaves, epsilon=1e-6,
                           max_coords=max_coords, rng=make_rng(seed, 98))
    worst = max(errs.values())
    module, prop = name.split(".", 1)
    return Check(module, f"grad.{prop}", worst < GRAD_TOL, f"max_rel_err={worst:.2e}")


# -- suites -------------------------------------------------------------------------

def grad_suite(seed: int = 0) -> Iterator[Check]:
    """Finite differences against backward() for every layer type and the full desk network."""
    with precision("f64"):
        r = make_rng(seed, 1)
        T = tensor
        cases = [
            ("tensor.add", lambda p: T.add(p["a"], p["b"]), {"a": r.standard_normal((3, 4)), "b": r.standard_normal((4,))}),
            ("tensor.sub", lambda p: T.sub(p["a"], p["b"]), {"a": r.standard_normal((3, 4)), "b": r.standard_normal((3, 1))}),
            ("tensor.mul", lambda p: T.mul(p["a"], p["b"]), {"a": r.standard_normal((2, 3)), "b": r.standard_normal((2, 3))}),
            ("tensor.div", lambda p: T.div(p["a"], p["b"]), {"a": r.standard_normal((2, 3)), "b": r.uniform(0.5, 2, (2, 3))}),
            ("tensor.exp", lambda p: T.exp(p["a"]), {"a": r.standard_normal((5,))}),
            ("tensor.log", lambda p: T.log(p["a"]), {"a": r.uniform(0.2, 3, (5,))}),
            ("tensor.square", lambda p: T.square(p["a"]), {"a": r.standard_normal((5,))}),
            ("tensor.relu", lambda p: T.relu(p["a"]), {"a": kink_free(r, (4, 5))}),
            ("tensor.sigmoid", lambda p: T.sigmoid(p["a"]), {"a": 3 * r.standard_normal((6,))}),
            ("tensor.matmul", lambda p: T.matmul(p["a"], p["b"]), {"a": r.standard_normal((2, 3, 4)), "b": r.standard_normal((4, 5))}),
            ("tensor.sum", lambda p: T.reduce("sum", p["a"], axis=1, keepdims=True), {"a": r.standard_normal((3, 4))}),
            ("tensor.mean", lambda p: T.reduce("mean", p["a"], axis=(0, 2)), {"a": r.standard_normal((2, 3, 4))}),
            ("tensor.max", lambda p: T.reduce("max", p["a"], axis=-1), {"a": distinct_values(r, (3, 5))}),
            ("tensor.reshape", lambda p: T.reshape(p["a"], (6, 2)), {"a": r.standard_normal((3, 4))}),
            ("tensor.transpose", lambda p: T.transpose(p["a"], (2, 0, 1)), {"a": r.standard_normal((2, 3, 4))}),
            ("tensor.getitem", lambda p: T.getitem(p["a"], (slice(None), [0, 2, 2])), {"a": r.standard_normal((3, 4))}),
            ("tensor.concat", lambda p: T.concat([p["a"], p["b"]], axis=1), {"a": r.standard_normal((2, 3)), "b": r.standard_normal((2, 2))}),
            ("tensor.stack", lambda p: T.stack([p["a"], p["b"]], axis=0), {"a": r.standard_normal((2, 3)), "b": r.standard_normal((2, 3))}),
            ("tensor.softmax", lambda p: T.softmax(p["a"], axis=-1), {"a": r.standard_normal((3, 4))}),
            ("tensor.log_softmax", lambda p: T.log_softmax(p["a"], axis=0), {"a": r.standard_normal((3, 4))}),
            ("tensor.dropout", lambda p: T.dropout(p["a"], 0.5, make_rng(seed, 7), True), {"a": r.standard_normal((4, 6))}),
            ("conv.conv2d_same", lambda p: conv.conv2d(p["x"], p["k"], 1, "same", p["b"]),
             {"x": r.standard_normal((2, 2, 6, 6)), "k": r.standard_normal((3, 2, 3, 3)), "b": r.standard_normal(3)}),
            ("conv.conv2d_stride2", lambda p: conv.conv2d(p["x"], p["k"], 2, "same"),
             {"x": r.standard_normal((1, 2, 6, 6)), "k": r.standard_normal((2, 2, 3, 3))}),
            ("conv.conv2d_valid", lambda p: conv.conv2d(p["x"], p["k"], 1, "valid"),
             {"x": r.standard_normal((1, 1, 7, 7)), "k": r.standard_normal((2, 1, 5, 5))}),
            ("conv.depthwise_conv2d", lambda p: conv.depthwise_conv2d(p["x"], p["k"]),
             {"x": r.standard_normal((2, 3, 5, 5)), "k": r.standard_normal((3, 1, 3, 3))}),
            ("conv.depthwise_separable_conv", lambda p: conv.depthwise_separable_conv(p["x"], p["d"], p["p"], p["b"]),
             {"x": r.standard_normal((2, 3, 5, 5)), "d": r.standard_normal((3, 1, 3, 3)),
              "p": r.standard_normal((4, 3, 1, 1)), "b": r.standard_normal(4)}),
            ("conv.maxpool2d", lambda p: conv.maxpool2d(p["x"], 2), {"x": distinct_values(r, (2, 2, 4, 4))}),
            ("conv.upsample2d", lambda p: conv.upsample2d(p["x"], 2), {"x": r.standard_normal((1, 2, 3, 3))}),
            ("conv.resize_nearest", lambda p: conv.resize_nearest(p["x"], 7, 5), {"x": r.standard_normal((1, 2, 3, 4))}),
            ("conv.global_avg_pool", lambda p: conv.global_avg_pool(p["x"]), {"x": r.standard_normal((2, 3, 4, 4))}),
            ("conv.dense", lambda p: conv.dense(p["x"], p["w"], p["b"]),
             {"x": r.standard_normal((3, 5)), "w": r.standard_normal((5, 2)), "b": r.standard_normal(2)}),
        ]
        for name, build, inputs in cases:
            yield _grad_case(name, build, inputs, seed)

        # Residual blocks with their own parameters.
        for name, specs, fwd, shape in (
            ("layers.sconv_block_pool", layers.sconv_block_specs("b", 2, 3, 3, True),
             lambda x, p: layers.sconv_block(x, p, "b", True), (2, 2, 6, 6)),
            ("layers.sconv_block_identity", layers.sconv_block_specs("b", 3, 3, 3, False),
             lambda x, p: layers.sconv_block(x, p, "b", False), (2, 3, 4, 4)),
            ("layers.unet_block", layers.unet_block_specs("b", 2, 3),
             lambda x, p: layers.unet_block(x, p, "b"), (2, 2, 4, 4)),
        ):
            params = layers.init_params(specs, make_rng(seed, 2))
            inputs = {"x": r.standard_normal(shape), **{k: v.data.copy() for k, v in params.items()}}
            yield _grad_case(name, lambda p, fwd=fwd: fwd(p["x"], layers.NetworkParams(
                (k, v) for k, v in p.items() if k != "x")), inputs, seed)

        cfg = CrfConfig(iterations=3)
        img = r.random((5, 5))
        logits = r.standard_normal((5, 5, 2))
        yield _grad_case("crf.mean_field_infer", lambda p: crf.mean_field_infer(tensor.softmax(p["z"]), img, cfg),
                         {"z": logits}, seed)
        labels = (r.random((5, 5)) < 0.5).astype(int)

        def seg(p):
            u = tensor.softmax(p["z"])
            return crf.segmentation_loss(u, crf.mean_field_infer(u, img, cfg), labels, img, cfg, 0.67)
        yield _grad_case("crf.segmentation_loss", seg, {"z": logits}, seed)

        yield full_network_grad_check(seed)


def full_network_grad_check(seed: int = 0, max_coords: int = 2, epsilon: float = 1e-3) -> Check:
    """Every parameter tensor of the desk network under the joint and segmentation losses."""
    with precision("f64"):
        cfg = model.network_config("desk")
        ccfg = CrfConfig(iterations=2)
        params = model.init_network(cfg, make_rng(seed, 3))
        r = make_rng(seed, 4)
        # Zero-initialized tensors make the soft mask spatially constant, which
        # puts every max-pool of the mask classifier on a tie; move off it.
        for p in params.values():
            p.data += 0.05 * r.standard_normal(p.shape)
        ctx = r.random((2, cfg.in_channels, cfg.context_size, cfg.context_size))
        bbox = r.random((2, 1, cfg.bbox_size, cfg.bbox_size))
        mask = (r.random((2, cfg.mask_size, cfg.mask_size)) < 0.5).astype(int)
        labels = np.array([0, 1])

        def loss():
            out = model.fused_forward(ctx, bbox, params, cfg, ccfg, train_mode=True, rng=make_rng(seed, 5))
            total = model.class_nll(out.class_probs, labels) + model.class_nll(out.lpl_probs, labels) \
                + model.class_nll(out.cgl_probs, labels)
            return total + model.seg_loss_for_batch(out.unet_probs, out.crf_probs, mask, bbox, cfg, ccfg, 0.67)

        skipped: dict = {}
        errs = check_gradients(loss, params, epsilon=epsilon, max_coords=max_coords, rng=make_rng(seed, 6),
                               piecewise=True, skipped=skipped, order=4)
    worst_name = max(errs, key=errs.get)
    probed = sum(min(p.size, max_coords) for p in params.values())
    n_skip = sum(skipped.values())
    ok = errs[worst_name] < GRAD_TOL and n_skip <= MAX_SKIPPED_FRACTION * probed
    return Check("model", "grad.dualcorenet_desk", ok,
                 f"tensors={len(errs)} coords={probed} on_kink={n_skip} "
                 f"max_rel_err={errs[worst_name]:.2e} at {worst_name}")


def crf_suite(seed: int = 0) -> Iterator[Check]:
    with precision("f64"):
        r = make_rng(seed, 10)
        worst = 0.0
        for h, w in ((1, 1), (2, 3), (5, 4), (8, 8), (12, 12)):
            cfg = CrfConfig(iterations=int(r.integers(1, 6)), spatial_theta=float(r.uniform(0.5, 4)),
                            bilateral_theta_spatial=float(r.uniform(20, 200)),
                            bilateral_theta_intensity=float(r.uniform(0.05, 0.5)),
                            w_spatial=float(r.uniform(0, 3)), w_bilateral=float(r.uniform(0, 3)))
            unary = r.dirichlet((1, 1), size=(h, w))
            img = r.random((h, w))
            got = crf.mean_field_infer(unary, img, cfg).data
            ref = dense_mean_field_oracle(unary, img, cfg)
            worst = max(worst, float(np.max(np.abs(got - ref) / np.maximum(np.abs(ref), 1e-300))))
        yield Check("crf", "dense_oracle_equivalence", worst < CRF_TOL, f"max_rel_err={worst:.2e}")

        unary = r.dirichlet((1, 1), size=(9, 9))
        img = r.random((9, 9))
        dev = 0.0
        neg = False
        for t in range(1, 6):
            q = crf.mean_field_infer(unary, img, CrfConfig(iterations=t)).data
            dev = max(dev, float(np.max(np.abs(q.sum(-1) - 1))))
            neg = neg or bool((q < 0).any())
        yield Check("crf", "normalized_every_iteration", dev < NORM_TOL and not neg, f"max_sum_dev={dev:.2e}")

        zero = CrfConfig(w_spatial=0.0, w_bilateral=0.0)
        u = Tensor(unary)
        same = crf.mean_field_infer(u, img, zero).data
        yield Check("crf", "zero_weights_identity", bool(np.array_equal(same, unary)), "bitwise")

        single = r.dirichlet((1, 1), size=(1, 1))
        got = crf.mean_field_infer(single, r.random((1, 1)), CrfConfig()).data
        ref = np.exp(np.log(single)) / np.exp(np.log(single)).sum(-1, keepdims=True)
        yield Check("crf", "single_pixel_softmax", bool(np.allclose(got, ref, rtol=0, atol=1e-12)),
                    f"max_abs_err={np.max(np.abs(got - ref)):.1e}")

        block_u, block_img = block_fixture()
        q = crf.mean_field_infer(block_u, block_img, CrfConfig()).data
        fg = q[..., 1] >= 0.5
        _, n_comp = ndimage.label(fg)
        oracle = dense_mean_field_oracle(block_u, block_img, CrfConfig())
        err = float(np.max(np.abs(q - oracle)))
        yield Check("crf", "block_fixture", n_comp == 1 and err < CRF_TOL,
                    f"components={n_comp} max_abs_err_vs_oracle={err:.1e}")

        noisy_u, noisy_img = noisy_block_fixture()
        counts = [isolated_flips(noisy_u)] + [
            isolated_flips(crf.mean_field_infer(noisy_u, noisy_img, CrfConfig(iterations=t)).data) for t in range(1, 6)]
        mono = all(b <= a for a, b in zip(counts, counts[1:]))
        yield Check("crf", "isolated_flips_non_increasing", mono, f"counts={counts}")

        board = np.indices((3, 3)).sum(0) % 2
        unit = CrfConfig(spatial_theta=1e6, bilateral_theta_spatial=1e9, bilateral_theta_intensity=1e6)
        flat = np.zeros((3, 3))
        e = crf.pairwise_energy(board, flat, unit)
        expected = 2.0 * 20  # 5 x 4 disagreeing pairs, two unit kernels
        yield Check("crf", "pairwise_checkerboard", abs(e - expected) < 1e-6 * expected, f"energy={e:.9f} expected={expected}")
        lab = (r.random((6, 5)) < 0.5).astype(int)
        im6 = r.random((6, 5))
        e, ref = crf.pairwise_energy(lab, im6, CrfConfig()), pairwise_energy_oracle(lab, im6, CrfConfig())
        yield Check("crf", "pairwise_bruteforce", abs(e - ref) <= 1e-9 * max(1.0, abs(ref)), f"energy={e:.6f} oracle={ref:.6f}")
        e0 = crf.pairwise_energy(np.ones((4, 4), int), r.random((4, 4)), CrfConfig())
        yield Check("crf", "pairwise_uniform_zero", e0 == 0.0, f"energy={e0}")

        u8 = r.dirichlet((1, 1), size=(8, 8))
        img8 = r.random((8, 8))
        lab8 = (r.random((8, 8)) < 0.5).astype(int)
        cfg = CrfConfig()
        q8 = crf.mean_field_infer(u8, img8, cfg)
        l0 = crf.segmentation_loss(u8, q8, lab8, img8, cfg, 0.0).data
        ce = crf.cross_entropy_map(u8, lab8).data
        yield Check("crf", "lambda_zero_plain_ce", bool(np.array_equal(l0, ce)), "bitwise")
        lam = 0.67
        got = float(crf.segmentation_loss(u8, q8, lab8, img8, cfg, lam).data)
        ce_u = -np.mean(np.log(np.maximum(np.where(lab8 == 1, u8[..., 1], u8[..., 0]), PROB_EPS)))
        qd = q8.data
        ce_q = -np.mean(np.log(np.maximum(np.where(lab8 == 1, qd[..., 1], qd[..., 0]), PROB_EPS)))
        ref = (1 - lam) * ce_u + lam * ce_q + lam * cfg.pairwise_beta * pairwise_energy_oracle(lab8, img8, cfg) / lab8.size
        yield Check("crf", "loss_term_by_term", abs(got - ref) < 1e-9 * max(1.0, abs(ref)), f"loss={got:.9f} oracle={ref:.9f}")


def block_fixture(size: int = 9, block: int = 5, p: float = 0.9) -> tuple[np.ndarray, np.ndarray]:
    """Uniform image; foreground probability ``p`` on a centred block, ``1 - p`` elsewhere."""
    fg = np.full((size, size), 1 - p)
    lo = (size - block) // 2
    fg[lo:lo + block, lo:lo + block] = p
    return np.stack([1 - fg, fg], axis=-1), np.full((size, size), 0.5)


def noisy_block_fixture(seed: int = 0, size: int = 12) -> tuple[np.ndarray, np.ndarray]:
    """The block fixture with 15% of pixels pushed weakly (p = 0.35 / 0.65) to the wrong label."""
    unary, img = block_fixture(size, 6)
    flip = make_rng(seed, 11).random((size, size)) < 0.15
    fg = np.where(flip, np.where(unary[..., 1] > 0.5, 0.35, 0.65), unary[..., 1])
    return np.stack([1 - fg, fg], axis=-1), img


def isolated_flips(q: np.ndarray) -> int:
    """Pixels whose argmax label differs from all of their 4-neighbours."""
    lab = np.argmax(q, axis=-1)
    pad = np.pad(lab, 1, mode="edge")
    h, w = lab.shape
    neigh = [pad[:-2, 1:-1], pad[2:, 1:-1], pad[1:-1, :-2], pad[1:-1, 2:]]
    same = np.zeros_like(lab, dtype=bool)
    for n, valid in zip(neigh, _neighbour_masks(h, w)):
        same |= valid & (n == lab)
    return int((~same).sum())


def _neighbour_masks(h: int, w: int):
    up = np.ones((h, w), bool)
    up[0] = False
    down = np.ones((h, w), bool)
    down[-1] = False
    left = np.ones((h, w), bool)
    left[:, 0] = False
    right = np.ones((h, w), bool)
    right[:, -1] = False
    return up, down, left, right


def metrics_suite(seed: int = 0) -> Iterator[Check]:
    r = make_rng(seed, 20)
    worst = 0.0
    worst_pair = 0.0
    for i in range(200):
        n = int(r.integers(2, 1001))
        labels = r.integers(0, 2, n)
        labels[0], labels[1] = 0, 1
        scores = np.round(r.random(n), int(r.integers(1, 4)))  # coarse rounding creates ties
        trap = metrics.roc_auc(scores, labels).auc
        worst = max(worst, abs(trap - metrics.mann_whitney_auc(scores, labels)))
        if n <= 200:
            worst_pair = max(worst_pair, abs(trap - pairwise_auc_oracle(scores, labels)))
    yield Check("metrics", "auc_trapezoid_equals_mann_whitney", worst <= AUC_TOL, f"instances=200 max_abs_diff={worst:.1e}")
    yield Check("metrics", "auc_pairwise_enumeration", worst_pair <= AUC_TOL, f"max_abs_diff={worst_pair:.1e}")

    fixtures = [
        ("auc_fixture_0.75", metrics.roc_auc([0.9, 0.8, 0.3, 0.2], [1, 0, 1, 0]).auc, 0.75),
        ("auc_perfect", metrics.roc_auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]).auc, 1.0),
        ("auc_all_ties", metrics.roc_auc([0.5] * 6, [1, 0, 1, 0, 0, 1]).auc, 0.5),
    ]
    a = np.zeros((4, 4), int)
    a[0, 0:2] = a[1, 0:2] = 1
    b = np.zeros((4, 4), int)
    b[1, 0:2] = b[2, 0:2] = 1
    disjoint = np.zeros((4, 4), int)
    disjoint[3, 2:] = 1
    fixtures += [
        ("dice_identical", metrics.dice(a, a), 1.0),
        ("dice_disjoint", metrics.dice(a, disjoint), 0.0),
        ("dice_half_overlap", metrics.dice(a, b), 0.5),
        ("dice_both_empty", metrics.dice(np.zeros((3, 3)), np.zeros((3, 3))), 1.0),
        ("dice_symmetric", metrics.dice(b, a), metrics.dice(a, b)),
    ]
    for name, got, want in fixtures:
        yield Check("metrics", name, got == want, f"value={got} expected={want}")

    curve = metrics.roc_auc([0.9, 0.7, 0.7, 0.1], [1, 0, 1, 0])
    ok = curve.points[0] == (0.0, 0.0) and curve.points[-1] == (1.0, 1.0) and bool(np.all(np.diff(curve.fpr) >= 0))
    yield Check("metrics", "roc_endpoints", ok, f"points={len(curve.points)}")
    s = r.random(50)
    y = r.integers(0, 2, 50)
    y[:2] = (0, 1)
    c1, c2 = metrics.roc_auc(s, y), metrics.roc_auc(np.exp(3 * s) + 7, y)
    same = c1.auc == c2.auc and np.array_equal(c1.fpr, c2.fpr) and np.array_equal(c1.tpr, c2.tpr)
    yield Check("metrics", "auc_monotone_invariance", bool(same), f"auc={c1.auc:.6f}")

    half = np.full((3, 3), 0.5)
    hi = np.full((3, 3), 0.9)
    yield Check("metrics", "binarize_threshold_inclusive", bool(metrics.binarize(half).all()), "0.5 >= 0.5")
    yield Check("metrics", "binarize_empty_above_max", not metrics.binarize(hi, 0.999).any(), "max 0.9 at 0.999")
    m = (r.random((5, 5)) < 0.5).astype(float)
    onehot = np.stack([1 - m, m], axis=-1)
    yield Check("metrics", "binarize_roundtrip", bool(np.array_equal(metrics.binarize(onehot), m)), "one-hot mask")


def separable_suite(seed: int = 0, instances: int = 50) -> Iterator[Check]:
    with precision("f64"):
        r = make_rng(seed, 30)
        mismatches = 0
        for _ in range(instances):
            c, o, s, k = int(r.integers(1, 5)), int(r.integers(1, 5)), int(r.integers(3, 9)), int(r.choice([1, 3, 5]))
            x = r.standard_normal((int(r.integers(1, 3)), c, s, s))
            d = r.standard_normal((c, 1, k, k))
            p = r.standard_normal((o, c, 1, 1))
            got = conv.depthwise_separable_conv(Tensor(x), Tensor(d), Tensor(p)).data
            mismatches += not np.array_equal(got, composed_separable_oracle(x, d, p))
    yield Check("conv", "separable_equals_composed", mismatches == 0, f"instances={instances} mismatches={mismatches}")


SUITES: dict[str, Callable[[int], Iterator[Check]]] = {
    "grad": grad_suite,
    "crf": crf_suite,
    "metrics": lambda seed=0: _chain(metrics_suite(seed), separable_suite(seed)),
}


def _chain(*its):
    for it in its:
        yield from it


def run_suites(names, seed: int = 0, emit: Callable[[str], None] | None = None) -> list[Check]:
    """Run the named suites (``all`` expands to every suite) and return their checks."""
    expanded = list(SUITES) if "all" in names else list(names)
    results = []
    for name in expanded:
        if name not in SUITES:
            raise KeyError(f"unknown suite {name!r}")
        for check in SUITES[name](seed):
            results.append(check)
            if emit is not None:
                emit(check.line)
    return results
