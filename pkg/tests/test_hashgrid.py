import math

import numpy as np
import pytest
import torch

from avatarforge.hashgrid import DomainError, HashGridEncoding, PRIMES


def reference_encode(enc: HashGridEncoding, point):
    """Independent trilinear lookup, one level and one corner at a time."""
    lo = enc.aabb_min.numpy()
    hi = enc.aabb_max.numpy()
    u = (np.asarray(point, np.float64) - lo) / (hi - lo)
    table = enc.feature_table.detach().numpy()
    out = []
    for level in range(enc.num_levels):
        res = enc.resolutions[level]
        pos = u * res
        c0 = np.minimum(np.maximum(np.floor(pos).astype(np.int64), 0), res - 1)
        frac = pos - c0
        acc = np.zeros(enc.feature_dim)
        for corner in range(8):
            offs = np.array([(corner >> a) & 1 for a in range(3)])
            cc = c0 + offs
            w = np.prod(np.where(offs == 1, frac, 1.0 - frac))
            if (res + 1) ** 3 <= enc.table_size:
                idx = cc[0] + cc[1] * (res + 1) + cc[2] * (res + 1) ** 2
            else:
                idx = (cc[0] * PRIMES[0] ^ cc[1] * PRIMES[1]
                       ^ cc[2] * PRIMES[2]) & (enc.table_size - 1)
            acc += w * table[idx + enc.level_offsets[level]]
        out.append(acc)
    return np.concatenate(out)


@pytest.fixture
def enc():
    # spans both dense and hashed levels: level resolutions 8..27 with a
    # 4096-row table (dense up to res 15, hashed beyond)
    return HashGridEncoding(num_levels=6, base_resolution=8,
                            per_level_scale=1.3, table_size=2 ** 12,
                            feature_dim=2, init_std=0.1,
                            generator=torch.Generator().manual_seed(0))


def test_level_resolutions_follow_geometric_growth(enc):
    # [DERIVED] N_l = floor(base * scale^l)
    for lv, res in enumerate(enc.resolutions):
        assert res == math.floor(8 * 1.3 ** lv)


def test_dense_levels_are_exactly_those_that_fit(enc):
    for lv, res in enumerate(enc.resolutions):
        assert enc.dense_level[lv] == ((res + 1) ** 3 <= enc.table_size)
    assert any(enc.dense_level) and not all(enc.dense_level)


def test_matches_independent_trilinear_oracle(enc, rng):
    pts = rng.uniform(-1, 1, size=(50, 3))
    got = enc(torch.as_tensor(pts, dtype=torch.float32)).detach().numpy()
    want = np.stack([reference_encode(enc, p) for p in pts])
    np.testing.assert_allclose(got, want, rtol=1e-4, atol=1e-5)


def test_grid_corner_returns_stored_features(enc):
    # at an exact lattice point of every level the interpolation weights
    # collapse onto single corners
    p = torch.tensor([[-1.0, -1.0, -1.0]])   # corner (0,0,0) at all levels
    got = enc(p)[0].detach().numpy()
    table = enc.feature_table.detach().numpy()
    for lv in range(enc.num_levels):
        row = enc.corner_indices(torch.zeros(1, 3, dtype=torch.long), lv)
        np.testing.assert_allclose(got[2 * lv:2 * lv + 2], table[int(row)],
                                   rtol=1e-5, atol=1e-6)


def test_interpolation_is_linear_along_an_axis(rng):
    # within one cell of a 1-level grid the encoding is affine per axis
    enc = HashGridEncoding(num_levels=1, base_resolution=4, table_size=2 ** 10,
                           init_std=0.1,
                           generator=torch.Generator().manual_seed(1))
    base = np.array([-0.9, 0.1, 0.3])
    step = np.array([0.08, 0.0, 0.0])   # stays inside the 0.5-wide cell
    a = enc(torch.as_tensor(base[None], dtype=torch.float32))
    b = enc(torch.as_tensor((base + step)[None], dtype=torch.float32))
    mid = enc(torch.as_tensor((base + step / 2)[None], dtype=torch.float32))
    np.testing.assert_allclose(mid.detach().numpy(),
                               ((a + b) / 2).detach().numpy(),
                               rtol=1e-4, atol=1e-6)


def test_continuity_across_cell_boundaries(enc):
    # encoding at a shared cell face agrees when approached from both sides
    eps = 1e-5
    x = -1.0 + 2.0 * (3 / 8)            # a level-0 lattice plane
    left = enc(torch.tensor([[x - eps, 0.2, -0.3]]))
    right = enc(torch.tensor([[x + eps, 0.2, -0.3]]))
    np.testing.assert_allclose(left.detach().numpy(), right.detach().numpy(),
                               atol=1e-3)


def test_dense_level_edit_is_local():
    enc = HashGridEncoding(num_levels=1, base_resolution=4, table_size=2 ** 10,
                           init_std=0.1,
                           generator=torch.Generator().manual_seed(2))
    far = torch.tensor([[0.8, 0.8, 0.8]])
    near = torch.tensor([[-0.95, -0.95, -0.95]])
    before_far = enc(far).detach().clone()
    before_near = enc(near).detach().clone()
    with torch.no_grad():
        enc.feature_table[0] += 1.0     # corner (0,0,0) of the dense level
    np.testing.assert_allclose(enc(far).detach(), before_far)
    assert not torch.allclose(enc(near).detach(), before_near)


def test_point_gradients_flow(enc):
    x = torch.tensor([[0.11, -0.2, 0.35]], requires_grad=True)
    enc(x).sum().backward()
    assert x.grad is not None and float(x.grad.abs().sum()) > 0


def test_out_of_domain_raises(enc):
    with pytest.raises(DomainError):
        enc(torch.tensor([[1.5, 0.0, 0.0]]))
    # opt-out clamps instead of raising
    enc(torch.tensor([[1.5, 0.0, 0.0]]), check_domain=False)


def test_table_size_must_be_power_of_two():
    with pytest.raises(ValueError):
        HashGridEncoding(table_size=1000)


def test_output_dim(enc):
    assert enc.output_dim == 6 * 2
    assert enc(torch.zeros(5, 3)).shape == (5, 12)
