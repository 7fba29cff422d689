"""Regenerate the golden .swm files: python tests/data/make_golden.py"""
from pathlib import Path

import numpy as np

from swmkit.codec import compress, serialize
from swmkit.tensor_nn import FC, Conv, NetworkDef, Pool, TrainedModel, from_kernels, kernel_count, weight_shape

HERE = Path(__file__).parent


def _models(net, layer_patterns, n_models):
    """Weights 1, 2, 3, ... over each layer; model k keeps layer_patterns[i][k] in every kernel."""
    models = [TrainedModel(net, [None] * len(net.layers), [None] * len(net.layers), [None] * len(net.layers)) for _ in range(n_models)]
    for i, layer in enumerate(net.layers):
        if i not in layer_patterns:
            continue
        for k, m in enumerate(models):
            pat = np.array(layer_patterns[i][k], dtype=bool)
            mask = from_kernels(layer, np.broadcast_to(pat, (kernel_count(layer),) + pat.shape)).copy()
            w = np.arange(1, mask.size + 1, dtype=np.float32).reshape(weight_shape(layer))
            m.masks[i] = mask
            m.weights[i] = np.where(mask, w, 0).astype(np.float32)
            m.biases[i] = np.arange(mask.shape[0], dtype=np.float32) * 0.5 + k
    return models


def conv_bundle():
    net = NetworkDef((1, 5, 5), (Conv(1, 2, 3, 3), Pool("max", 3)))
    pats = {0: [[[0, 0, 0], [0, 1, 0], [0, 1, 0]], [[0, 1, 0], [1, 1, 1], [0, 1, 0]], [[1, 1, 0], [1, 1, 1], [1, 1, 0]]]}
    return compress(_models(net, pats, 3))


def fc_bundle():
    net = NetworkDef((1, 1, 4), (FC(4, 4, 2, 2, "none"),))
    pats = {0: [[[1, 0], [0, 0]], [[1, 1], [0, 1]]]}
    return compress(_models(net, pats, 2))


GOLDEN = {"conv3_models.swm": conv_bundle, "fc2_models.swm": fc_bundle}

if __name__ == "__main__":
    for name, build in GOLDEN.items():
        (HERE / name).write_bytes(serialize(build()))
        print("wrote", name)
