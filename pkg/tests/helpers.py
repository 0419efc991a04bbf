"""Networks with known outputs, for driving the decision logic exactly."""

import numpy as np

from wisdomnet.ensemble import EnsembleLayer, Role
from wisdomnet.member_network import build_member


def constant_member(seed, side, p_class1):
    """Member whose output is ``[1 - p, p]`` for every image.

    All weights are zero, so only the last bias reaches the softmax.
    """
    net = build_member(seed, side)
    for t in net.params.values():
        t.data[...] = 0
    net.params["dense3.bias"].data[:] = [0.0, np.log(p_class1 / (1 - p_class1))]
    return net


def constant_layer(p_values, side=8, role=Role.COVID, first_seed=0):
    return EnsembleLayer([constant_member(first_seed + i, side, p) for i, p in enumerate(p_values)], role)
