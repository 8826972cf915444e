"""Mean-field CRF smoothing of a noisy square, checked against the all-pairs oracle."""

import numpy as np

from dualcorenet import CrfConfig, Tensor, precision
from dualcorenet.crf import mean_field_infer
from dualcorenet.verify import dense_mean_field_oracle, isolated_flips, noisy_block_fixture

with precision("f64"):
    unary, image = noisy_block_fixture(seed=0, size=12)
    print("isolated label flips before:", isolated_flips(unary))
    for iterations in (1, 3, 5):
        cfg = CrfConfig(iterations=iterations)
        q = mean_field_infer(Tensor(unary), image, cfg).data
        oracle = dense_mean_field_oracle(unary, image, cfg)
        print(f"{iterations} iteration(s): flips {isolated_flips(q)}, "
              f"max deviation from oracle {np.abs(q - oracle).max():.1e}")
    print("foreground after 5 iterations:")
    for row in np.argmax(q, axis=-1):
        print("".join("#" if v else "." for v in row))
