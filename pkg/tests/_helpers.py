"""Random shared-weight model sets for codec property tests."""
import numpy as np

from swmkit.tensor_nn import FC, Conv, NetworkDef, TrainedModel, init_model, kernel_count, kernel_shape, from_kernels


def random_net(rng: np.random.Generator, kind: str) -> NetworkDef:
    if kind == "conv3":
        c, o, hw = rng.integers(1, 4), rng.integers(1, 5), rng.integers(3, 7)
        return NetworkDef((int(c), int(hw), int(hw)), (Conv(int(c), int(o), 3, 3),))
    if kind == "conv5":
        c, o, hw = rng.integers(1, 3), rng.integers(1, 4), rng.integers(5, 8)
        return NetworkDef((int(c), int(hw), int(hw)), (Conv(int(c), int(o), 5, 5),))
    bx, by = (int(v) for v in rng.integers(2, 5, size=2))
    gm, gn = (int(v) for v in rng.integers(1, 4, size=2))
    return NetworkDef((1, 1, by * gn), (FC(bx * gm, by * gn, bx, by),))


def random_kernel_masks(rng, k: int, p: int, density: float) -> np.ndarray:
    bits = rng.random((k, p)) < density
    empty = ~bits.any(axis=1)
    bits[np.flatnonzero(empty), rng.integers(0, p, size=int(empty.sum()))] = True
    return bits


def random_shared_models(rng, net: NetworkDef, n_models: int, nested: bool = False) -> list[TrainedModel]:
    """Models that agree on every shared position: each is the base weights under its own mask."""
    base = init_model(net, seed=int(rng.integers(1 << 30)))
    models = [TrainedModel(net, list(base.weights), [None] * len(net.layers), [None] * len(net.layers)) for _ in range(n_models)]
    for i in net.weighted_layers():
        layer = net.layers[i]
        kx, ky = kernel_shape(layer)
        prev = None
        for m in models:
            bits = random_kernel_masks(rng, kernel_count(layer), kx * ky, rng.uniform(0.15, 0.8))
            if nested and prev is not None:
                bits |= prev
            prev = bits
            mask = from_kernels(layer, bits.reshape(-1, kx, ky)).copy()
            m.masks[i] = mask
            m.weights[i] = np.where(mask, base.weights[i], 0).astype(np.float32)
            m.biases[i] = rng.standard_normal(base.biases[i].shape).astype(np.float32)
    return models
