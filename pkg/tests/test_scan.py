import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import identity_scan, identity_stack, max_grad_error, small_block, small_scan, small_stack

from efcm.scan import SCAN, ScanConfig, TransScanConfig, branch_transforms, channel_select, spatial_attend
from efcm.tensor import Tensor


def test_config_validation():
    with pytest.raises(ValueError):
        ScanConfig(30, groups=32)
    with pytest.raises(ValueError):
        TransScanConfig(dim=384, heads=5)
    assert TransScanConfig(dim=576).num_heads == 9
    assert TransScanConfig(dim=32).num_heads == 1


def test_shapes_and_parts():
    scan = small_scan(0)
    x = Tensor(np.random.default_rng(0).standard_normal((2, 8, 5, 5)))
    out, parts = scan(x, return_parts=True)
    assert out.shape == x.shape
    assert parts["a"].shape == (2, 8)
    for k in ("U~", "U^", "V", "U'"):
        assert parts[k].shape == x.shape


def test_unbatched_functional_spellings():
    scan = small_scan(1)
    x = Tensor(np.random.default_rng(1).standard_normal((8, 4, 4)))
    u1, u2 = branch_transforms(x, scan)
    assert u1.shape == (8, 4, 4)
    v, a, b = channel_select(u1, u2, scan)
    assert a.shape == (8,)
    assert spatial_attend(u1 + u2, scan).shape == (8, 4, 4)
    assert scan(x).shape == (8, 4, 4)


def test_channel_mismatch_raises():
    with pytest.raises(ValueError):
        small_scan(0)(Tensor(np.zeros((1, 4, 3, 3))))


def test_selection_matches_formula():
    scan = small_scan(2).eval()
    x = Tensor(np.random.default_rng(2).standard_normal((1, 8, 4, 4)))
    out, p = scan(x, return_parts=True)
    u = p["U~"].data + p["U^"].data
    a = p["a"].data[0][:, None, None]
    np.testing.assert_allclose(p["V"].data[0], a * p["U~"].data[0] + (1 - a) * p["U^"].data[0], atol=1e-12)
    np.testing.assert_allclose(out.data, x.data + p["U'"].data + p["V"].data, atol=1e-12)
    gate = 1 / (1 + np.exp(-(np.einsum("c,nchw->nhw", scan.spatial.weight.data[0, :, 0, 0], u) + scan.spatial.bias.data[0])))
    np.testing.assert_allclose(p["U'"].data, u * gate[:, None], atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.1, 50.0))
def test_selection_weights_sum_to_one(seed, scale):
    scan = small_scan(seed % 7)
    x = Tensor(np.random.default_rng(seed).standard_normal((3, 8, 3, 3)) * scale)
    _, p = scan(x, return_parts=True)
    a, b = p["a"].data, p["b"].data
    np.testing.assert_allclose(a + b, 1.0, atol=1e-12)
    assert np.all((a >= 0) & (a <= 1))


def test_identity_scan_triples():
    x = np.random.default_rng(5).standard_normal((2, 8, 6, 6))
    out = identity_scan(8, 2, 4).eval()(Tensor(x)).data
    np.testing.assert_array_equal(out, 3 * x)


@pytest.mark.parametrize("depth", [1, 2, 3])
def test_identity_stack_powers_of_three(depth):
    x = np.random.default_rng(6).standard_normal((1, 8, 4, 4))
    out = identity_stack(8, depth).eval()(Tensor(x)).data
    ref = x
    for _ in range(depth):
        ref = 3 * ref
    np.testing.assert_array_equal(out, ref)
    np.testing.assert_allclose(out, 3**depth * x, rtol=1e-15)


def test_transformer_block_token_permutation_equivariance():
    blk = small_block(3)
    t = np.random.default_rng(3).standard_normal((1, 6, 8))
    perm = np.random.default_rng(4).permutation(6)
    a = blk.forward_tokens(Tensor(t)).data
    b = blk.forward_tokens(Tensor(t[:, perm])).data
    np.testing.assert_allclose(b, a[:, perm], atol=1e-12)


def test_block_keeps_shape():
    blk = small_block(0)
    assert blk(Tensor(np.zeros((2, 8, 3, 5)))).shape == (2, 8, 3, 5)


@pytest.mark.parametrize("seed", [0, 1])
def test_scan_gradients(seed):
    scan = small_scan(seed)
    scan.train(seed % 2 == 0)
    x = np.random.default_rng(seed).standard_normal((2, 8, 4, 4))
    assert max_grad_error(scan, scan, x, seed) < 1e-4


def test_block_and_stack_gradients():
    blk = small_block(1)
    x = np.random.default_rng(1).standard_normal((1, 8, 3, 3))
    assert max_grad_error(blk, blk, x, 1, max_coords=12) < 1e-4
    stack = small_stack(2).eval()
    assert max_grad_error(stack, stack, x, 2, max_coords=6) < 1e-4


@pytest.mark.parametrize("train", [True, False])
def test_every_parameter_receives_gradient(train):
    stack = small_stack(4).train(train)
    x = Tensor(np.random.default_rng(4).standard_normal((2, 8, 4, 4)))
    r = np.random.default_rng(5).standard_normal((2, 8, 4, 4))
    (stack(x) * Tensor(r)).sum().backward()
    for name, p in stack.named_parameters():
        assert p.grad is not None and np.abs(p.grad).max() > 0, name
