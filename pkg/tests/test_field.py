import numpy as np
import pytest
import torch

from avatarforge.field import ImplicitAvatarField, frequency_embed
from conftest import TINY_FIELD_KWARGS


def unit(v):
    v = np.asarray(v, np.float64)
    return v / np.linalg.norm(v)


def test_fresh_field_carries_a_spherical_zero_level_set(tiny_field):
    # the analytic bias dominates at init: f ~ |x| - 0.5
    pts = torch.tensor([[0.0, 0.0, 0.0], [0.5, 0.0, 0.0], [0.9, 0.0, 0.0]])
    f = tiny_field.sdf(pts).detach().numpy()
    assert f[0] < -0.3            # deep inside
    assert abs(f[1]) < 0.1        # near the surface
    assert f[2] > 0.2             # outside


def test_sdf_gradient_matches_central_differences(tiny_field, rng):
    pts = rng.uniform(-0.8, 0.8, size=(20, 3))
    x = torch.as_tensor(pts, dtype=torch.float32)
    _, grad = tiny_field.sdf(x, with_gradient=True)
    grad = grad.detach().numpy()
    h = 1e-3
    for axis in range(3):
        shift = np.zeros(3)
        shift[axis] = h
        fp = tiny_field.sdf(torch.as_tensor(pts + shift, dtype=torch.float32))
        fm = tiny_field.sdf(torch.as_tensor(pts - shift, dtype=torch.float32))
        fd = (fp - fm).detach().numpy() / (2 * h)
        np.testing.assert_allclose(grad[:, axis], fd, rtol=5e-2, atol=5e-3)


def test_color_is_in_unit_range_and_requires_unit_directions(tiny_field, rng):
    x = torch.as_tensor(rng.uniform(-0.5, 0.5, size=(10, 3)),
                        dtype=torch.float32)
    d = torch.as_tensor(np.stack([unit(v) for v in
                                  rng.normal(size=(10, 3))]),
                        dtype=torch.float32)
    _, feat = tiny_field.sdf_and_feature(x)
    rgb = tiny_field.color(feat, d)
    assert rgb.shape == (10, 3)
    rgb_vals = rgb.detach()
    assert float(rgb_vals.min()) >= 0 and float(rgb_vals.max()) <= 1
    with pytest.raises(ValueError):
        tiny_field.color(feat, 2.0 * d)


def test_evaluate_returns_sdf_and_color(tiny_field):
    x = torch.zeros(4, 3)
    d = torch.tensor([[0.0, 0.0, 1.0]]).expand(4, 3)
    f, rgb = tiny_field.evaluate(x, d)
    assert f.shape == (4,) and rgb.shape == (4, 3)


def test_parameter_groups_partition_the_model(tiny_field):
    geo = {id(p) for p in tiny_field.geometry_parameters()}
    col = {id(p) for p in tiny_field.color_parameters()}
    assert not geo & col
    every = {id(p) for p in tiny_field.parameters()}
    assert geo | col | {id(tiny_field.log_s)} == every


def test_sharpness_is_positive_and_matches_init():
    field = ImplicitAvatarField(sharpness_init=30.0, **TINY_FIELD_KWARGS)
    assert float(field.sharpness_s.detach()) == pytest.approx(30.0, rel=1e-5)


def test_checkpoint_round_trip_reproduces_outputs(tiny_field, tmp_path, rng):
    path = tmp_path / "field.ckpt"
    tiny_field.save(path)
    loaded = ImplicitAvatarField.load(path)
    x = torch.as_tensor(rng.uniform(-0.9, 0.9, size=(30, 3)),
                        dtype=torch.float32)
    d = torch.as_tensor(np.stack([unit(v) for v in rng.normal(size=(30, 3))]),
                        dtype=torch.float32)
    f0, c0 = tiny_field.evaluate(x, d)
    f1, c1 = loaded.evaluate(x, d)
    np.testing.assert_allclose(f1.detach(), f0.detach(), atol=1e-6)
    np.testing.assert_allclose(c1.detach(), c0.detach(), atol=1e-6)


def test_loading_a_rig_file_as_field_checkpoint_fails(tmp_path,
                                                      capsule_rig_1joint):
    path = tmp_path / "rig.bin"
    capsule_rig_1joint.save(path)
    with pytest.raises(ValueError):
        ImplicitAvatarField.load(path)


def test_frequency_embedding_layout():
    d = torch.tensor([[0.0, 1.0, 0.0]])
    emb = frequency_embed(d, 2)
    assert emb.shape == (1, 3 * (1 + 2 * 2))
    np.testing.assert_allclose(emb[0, :3], [0, 1, 0])
    # band k=0: sin(d), cos(d)
    np.testing.assert_allclose(emb[0, 3:6].numpy(),
                               np.sin([0, 1, 0]), atol=1e-6)
    np.testing.assert_allclose(emb[0, 6:9].numpy(),
                               np.cos([0, 1, 0]), atol=1e-6)


def test_seed_controls_initialization():
    a = ImplicitAvatarField(seed=0, **TINY_FIELD_KWARGS)
    b = ImplicitAvatarField(seed=0, **TINY_FIELD_KWARGS)
    c = ImplicitAvatarField(seed=1, **TINY_FIELD_KWARGS)
    x = torch.full((3, 3), 0.2)
    np.testing.assert_array_equal(a.sdf(x).detach(), b.sdf(x).detach())
    assert not torch.allclose(a.sdf(x).detach(), c.sdf(x).detach())
