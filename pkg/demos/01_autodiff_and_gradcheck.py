"""Build a small expression on the tape, backpropagate, and compare with finite differences."""

import numpy as np

from dualcorenet import Tensor, precision
from dualcorenet.conv import depthwise_separable_conv
from dualcorenet.tensor import square
from dualcorenet.gradcheck import check_gradients

with precision("f64"):
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(1, 3, 6, 6)), requires_grad=True, name="x")
    depth = Tensor(rng.normal(size=(3, 1, 3, 3)), requires_grad=True, name="depth")
    point = Tensor(rng.normal(size=(4, 3, 1, 1)), requires_grad=True, name="point")

    def loss():
        return square(depthwise_separable_conv(x, depth, point)).mean()

    print("loss", loss().item())
    errors = check_gradients(loss, {"x": x, "depth": depth, "point": point}, epsilon=1e-6)
    for name, err in errors.items():
        print(f"{name:>6}: relative error {err:.2e}")
