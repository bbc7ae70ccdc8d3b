"""Independent reference values for the test suite.

Run ``python tests/oracles/derive.py`` to regenerate; the printed numbers
are frozen into the tests. Nothing here imports the package: values come
from mpmath at 50 digits or from explicit Python loops.
"""

import json

import mpmath as mp
import numpy as np

mp.mp.dps = 50


def softmax_123():
    e = [mp.e ** k for k in (1, 2, 3)]
    z = sum(e)
    return [float(v / z) for v in e]


def ddim_scalar():
    ab_t, ab_prev, x, eps = mp.mpf("0.25"), mp.mpf("0.81"), mp.mpf(1), mp.mpf("0.5")
    x0 = (x - mp.sqrt(1 - ab_t) * eps) / mp.sqrt(ab_t)
    return float(mp.sqrt(ab_prev) * x0 + mp.sqrt(1 - ab_prev) * eps)


def forward_scalar():
    return float(mp.sqrt(mp.mpf("0.25")) * 1 + mp.sqrt(mp.mpf("0.75")) * 2)


def two_step_schedule(beta_min=0.95 - 1e-6, beta_max=0.95):
    b1, b2 = mp.mpf(beta_min), mp.mpf(beta_max)
    return float((1 - b1) * (1 - b2))


def philox_normals(seed, n):
    """Box-Muller over the documented word-to-uniform map."""
    blocks = -(-2 * (-(-n // 2)) // 4)
    raw = np.random.Philox(key=seed, counter=[0, 0, 0, 0]).random_raw(4 * blocks)
    u = [((int(r) >> 11) + 0.5) * 2.0 ** -53 for r in raw]
    out = []
    for i in range(0, 2 * (-(-n // 2)), 2):
        rad = mp.sqrt(-2 * mp.log(u[i]))
        ang = 2 * mp.pi * u[i + 1]
        out += [float(rad * mp.cos(ang)), float(rad * mp.sin(ang))]
    return out[:n]


def main():
    values = {
        "softmax_123": softmax_123(),
        "ddim_scalar": ddim_scalar(),
        "forward_scalar": forward_scalar(),
        "two_step_alpha_bar": two_step_schedule(),
        "philox_normals_seed7": philox_normals(7, 6),
    }
    print(json.dumps(values, indent=2))


if __name__ == "__main__":
    main()
