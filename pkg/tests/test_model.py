import numpy as np
import pytest

from anca.classifier import focal_loss
from anca.errors import ConfigError
from anca.gradcheck import model_grad_check
from anca.model import Architecture, count_params, forward, param_shapes
from anca.nca import RolloutConfig, step_masks
from anca.optim import init_params
from anca.rng import Rng
from anca.tensor import Tape, Tensor


def setup(arch, batch=3, steps=2, seed=0):
    rng = Rng(seed)
    p = {k: v.astype(np.float64) + rng.derive("n", k).uniform(v.shape, -0.2, 0.2, np.float64)
         for k, v in init_params(arch, rng.derive("init")).items()}
    s = arch.input_size
    images = rng.derive("img").normal((batch, s, s, 3), dtype=np.float64)
    masks = step_masks(rng.derive("mask"), steps, (batch, s, s), 0.5)
    return p, images, masks


@pytest.mark.parametrize("mode", ["attention", "conv_attention", "max"])
def test_forward_shapes_and_simplex(mode):
    arch = Architecture(6, 5, 4, 6, mode, 0.25)
    p, images, masks = setup(arch)
    probs = forward({k: Tensor(v) for k, v in p.items()}, images, arch, RolloutConfig(2), masks).data
    assert probs.shape == (3, 4)
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)
    assert (probs >= 0).all()


def test_forward_rejects_wrong_image_shape():
    arch = Architecture(6, 5, 2, 6)
    p, images, masks = setup(arch)
    with pytest.raises(ConfigError):
        forward({k: Tensor(v) for k, v in p.items()}, images[:, :5], arch, RolloutConfig(2), masks)


def test_batch_rows_match_single_samples():
    arch = Architecture(6, 5, 3, 6, "attention", 0.25)
    p, images, masks = setup(arch)
    tp = {k: Tensor(v) for k, v in p.items()}
    batch = forward(tp, images, arch, RolloutConfig(2), masks).data
    for i in range(3):
        one = forward(tp, images[i:i + 1], arch, RolloutConfig(2), masks[:, i:i + 1]).data
        np.testing.assert_allclose(one[0], batch[i], rtol=1e-12)


def test_batch_gradient_is_mean_of_sample_gradients():
    arch = Architecture(6, 5, 3, 6, "attention", 0.25)
    p, images, masks = setup(arch)
    y = np.array([0, 2, 1])

    def grads(idx):
        tape = Tape()
        ps = {k: tape.watch(v) for k, v in p.items()}
        loss = focal_loss(forward(ps, images[idx], arch, RolloutConfig(2), masks[:, idx]), y[idx])
        return tape.gradient(loss, ps)

    full = grads(np.arange(3))
    parts = [grads(np.array([i])) for i in range(3)]
    for k in p:
        np.testing.assert_allclose(full[k], sum(g[k] for g in parts) / 3, rtol=1e-9, atol=1e-14)


@pytest.mark.parametrize("mode", ["attention", "conv_attention", "max"])
def test_whole_model_gradient(mode):
    arch = Architecture(6, 6, 3, 6, mode, 0.25)
    res = model_grad_check(arch, steps=3, n_coords=120)
    assert res.max_rel_error <= 1e-3
    assert set(res.coverage) == set(param_shapes(arch))
    assert all(v > 0 for v in res.coverage.values())


def test_counts_by_mode():
    assert count_params(Architecture(128, 128, 8, 64, "conv_attention")) == 84_608 + 129 + 129 * 8
    assert count_params(Architecture(128, 128, 2, 64, "max")) == 84_608 + 129 * 2
    assert count_params(Architecture(128, 128, 2, 32)) == 84_608 + 32 * 32 + 129 * 2


def test_architecture_validation():
    with pytest.raises(ConfigError):
        Architecture(channels=2)
    with pytest.raises(ConfigError):
        Architecture(classes=0)
    with pytest.raises(ConfigError):
        Architecture(pool_mode="mean")
