import numpy as np
import pytest
from hypothesis import given, strategies as st

from vmrfanet import ops
from vmrfanet.errors import ConfigError, DimensionError
from vmrfanet.gradcheck import check
from vmrfanet.mrfa import (MRFA, AttentionCameraExtractor, MrfaConfig, apply_mask, mask_to_pgm_bytes,
                           mrfa_forward)
from vmrfanet.nn import Conv2d
from vmrfanet.tensor import Parameter, Tensor, backward, no_grad


def _module(c, stride, seed=0):
    return MRFA(np.random.default_rng(seed), MrfaConfig(c, spatial_stride=stride))


def test_config_requires_multiple_of_four():
    with pytest.raises(ConfigError):
        MrfaConfig(6)
    assert MrfaConfig(8).out_channels == 16
    with pytest.raises(ConfigError):
        MrfaConfig(8, spatial_stride=3)


@pytest.mark.parametrize("c,h,w,stride", [(512, 48, 16, 2), (1024, 24, 8, 1)])
def test_full_scale_mask_shapes(c, h, w, stride):
    with no_grad():
        mask, feature = mrfa_forward(_module(c, stride), Tensor(np.zeros((1, c, h, w))))
    assert mask.shape == (1, 2 * c, h // stride, w // stride)
    assert feature.shape == (1, c, h // stride, w // stride)


@given(c=st.sampled_from([4, 8, 12]), h=st.integers(1, 5), w=st.integers(1, 4), stride=st.sampled_from([1, 2]),
       scale=st.floats(0.01, 1e4), seed=st.integers(0, 1000))
def test_mask_strictly_inside_open_interval(c, h, w, stride, scale, seed):
    r = np.random.default_rng(seed)
    module = _module(c, stride, seed)
    for p in module.parameters():
        p.data[...] = r.standard_normal(p.shape) * scale
    x = Tensor(r.standard_normal((2, c, h * stride, w * stride)) * scale)
    mask, feature = module(x)
    assert mask.shape == (2, 2 * c, h, w)
    assert np.all(mask.data > 0) and np.all(mask.data < 2)


def test_zero_module_gives_unit_mask_and_identity():
    module = _module(8, 2).zero_()
    x = Tensor(np.random.default_rng(0).standard_normal((2, 8, 6, 4)))
    mask, _ = module(x)
    assert np.all(mask.data == 1.0)
    feature = Tensor(np.random.default_rng(1).standard_normal(mask.shape))
    assert apply_mask(feature, mask).data.tobytes() == feature.data.tobytes()


def test_apply_mask_is_elementwise(rng):
    f = rng.standard_normal((2, 6, 3, 3)).astype(np.float32)
    m = rng.uniform(0, 2, f.shape).astype(np.float32)
    np.testing.assert_array_equal(apply_mask(Tensor(f), Tensor(m)).data, f * m)
    near_two = np.full(f.shape, 1.999999, np.float32)
    np.testing.assert_allclose(apply_mask(Tensor(f), Tensor(near_two)).data, 2 * f, rtol=1e-5)


def test_apply_mask_shape_mismatch():
    with pytest.raises(DimensionError) as err:
        apply_mask(Tensor(np.zeros((1, 4, 3, 3))), Tensor(np.zeros((1, 4, 3, 2))))
    assert tuple(err.value.axes) == (3,)


def test_apply_mask_gradient_reaches_both(rng):
    f = Parameter(rng.standard_normal((1, 2, 2, 2)))
    m = Parameter(rng.uniform(0.5, 1.5, (1, 2, 2, 2)))
    backward(ops.sum(apply_mask(f, m)))
    np.testing.assert_allclose(f.grad, m.data)
    np.testing.assert_allclose(m.grad, f.data)


def test_factorised_stacks_match_direct_kernel_shapes():
    r = np.random.default_rng(0)
    x = Tensor(np.zeros((1, 4, 9, 7)))
    direct5 = Conv2d(r, 4, 4, 5, padding=2)(x).shape
    direct7 = Conv2d(r, 4, 4, 7, padding=3)(x).shape
    module = _module(16, 1)
    b3, b4 = module.branches[2], module.branches[3]
    y3 = x
    for layer in b3.stack:
        y3 = layer(y3)
    y4 = x
    for layer in b4.stack:
        y4 = layer(y4)
    assert y3.shape == direct5 and y4.shape == direct7


def test_camera_extractor_shapes_and_pooling():
    ext = AttentionCameraExtractor(np.random.default_rng(0), 512, 512)
    ext.eval()
    with no_grad():
        out = ext(Tensor(np.zeros((4, 512, 24, 8))))
    assert out.shape == (4, 512)
    const = np.arange(6, dtype=np.float32)
    pooled = ops.pool2d(Tensor(np.broadcast_to(const[None, :, None, None], (2, 6, 3, 4))), "global_avg")
    np.testing.assert_array_equal(pooled.data.reshape(2, 6)[0], const)


def test_camera_extractor_gradient():
    r = np.random.default_rng(3)
    ext = AttentionCameraExtractor(r, 8, 5)
    x = Parameter(r.standard_normal((4, 8, 3, 2)))
    probe = Tensor(r.standard_normal((4, 5)))
    leaves = [x] + ext.parameters()
    # relu kinks: shift the extractor's batch-norm output away from zero
    ext.bn.bias.data[...] = 1.5
    assert check(lambda: ops.sum(ext(x) * probe), leaves) < 1e-3


def test_mask_pgm_scaling():
    m = np.stack([np.array([[0.5, 1.0], [1.5, 1.0]]), np.array([[0.5, 1.0], [1.5, 1.0]])])
    img = mask_to_pgm_bytes(m)
    assert img.dtype == np.uint8
    assert img.tolist() == [[0, 128], [255, 128]]
    assert mask_to_pgm_bytes(np.ones((3, 2, 2))).max() == 0
