import numpy as np
import pytest
import torch

from avatarforge.articulation import ArticulatedField, render_articulated
from avatarforge.body import BodyConfiguration, deformed_vertices
from avatarforge.meshrender import render_mesh, silhouette_iou
from avatarforge.renderer import Camera, render_image
from avatarforge.rigs import (AnalyticSDFField, capsule_sdf, make_capsule_rig)


def bent_configuration(model, angle=0.8):
    pose = np.zeros((model.num_joints, 3))
    pose[-1] = [angle, 0.0, 0.0]
    return BodyConfiguration(pose, np.zeros(model.num_shape_params))


def test_warp_recovers_canonical_vertices(capsule_rig_3joint, rng):
    m = capsule_rig_3joint
    cfg = BodyConfiguration(rng.normal(0, 0.5, size=(3, 3)),
                            rng.normal(0, 0.4, size=2),
                            rng.normal(0, 0.2, size=3))
    art = ArticulatedField(m, cfg)
    canonical, dist, _, _ = art.warp_to_canonical(art.deformed)
    np.testing.assert_allclose(dist, 0.0, atol=1e-9)
    err = np.linalg.norm(canonical - m.template_vertices, axis=1)
    assert err.max() < 1e-5


def test_identity_configuration_warp_is_identity(capsule_rig_3joint, rng):
    m = capsule_rig_3joint
    art = ArticulatedField(m, BodyConfiguration.canonical(m))
    pts = m.template_vertices[rng.integers(0, len(m.template_vertices), 50)]
    pts = pts + rng.normal(0, 0.01, size=pts.shape)
    canonical, _, _, _ = art.warp_to_canonical(pts)
    np.testing.assert_allclose(canonical, pts, atol=1e-9)


def test_warp_commutes_with_rigid_motion(capsule_rig_1joint, rng):
    # a purely rigid body motion: warping a moved point must land on the
    # same canonical point as the original
    m = capsule_rig_1joint
    aa = np.array([0.0, 0.0, 1.1])
    trans = np.array([0.2, -0.1, 0.3])
    cfg = BodyConfiguration(aa[None], np.zeros(2), trans)
    art = ArticulatedField(m, cfg)
    pts = m.template_vertices[rng.integers(0, len(m.template_vertices), 40)]
    from avatarforge.body import rodrigues
    moved = pts @ rodrigues(aa).T + trans
    canonical, _, _, _ = art.warp_to_canonical(moved)
    np.testing.assert_allclose(canonical, pts, atol=1e-9)


def test_density_mask_band(capsule_rig_1joint):
    m = capsule_rig_1joint
    art = ArticulatedField(m, BodyConfiguration.canonical(m), delta=0.1)
    d = np.array([0.0, 0.05, 0.1, 0.100001, 0.5])
    np.testing.assert_array_equal(art.density_mask(d), [1, 1, 1, 0, 0])
    smooth = ArticulatedField(m, BodyConfiguration.canonical(m), delta=0.1,
                              smooth_mask=True)
    sm = smooth.density_mask(np.array([0.05, 0.1, 0.11, 0.12, 0.2]))
    assert sm[0] == 1.0 and sm[1] == pytest.approx(1.0)
    assert 0 < sm[2] < 1 and abs(sm[3] - 0.0) < 1e-9 and sm[4] == 0.0


def test_default_delta_scales_with_height(capsule_rig_1joint):
    m = capsule_rig_1joint
    art = ArticulatedField(m, BodyConfiguration.canonical(m))
    assert art.delta == pytest.approx(0.05 * m.canonical_height)


def test_identity_articulated_render_matches_plain(capsule_rig_1joint):
    m = capsule_rig_1joint
    field = AnalyticSDFField(capsule_sdf(), color=(0.8, 0.3, 0.2),
                             sharpness=80.0)
    cam = Camera.look_at([2.2, 0.4, 0.3], [0, 0, 0], width=32, height=32,
                         focal=56.0, near=0.5, far=5.0)
    art = ArticulatedField(m, BodyConfiguration.canonical(m), delta=10.0)
    plain = render_image(field, cam, n_samples=64)
    warped = art.render(field, cam, n_samples=64,
                        clip_aabb=(np.array([-1.0, -1, -1]),
                                   np.array([1.0, 1, 1])))
    np.testing.assert_allclose(warped.rgb, plain.rgb, atol=1e-5)
    np.testing.assert_allclose(warped.opacity, plain.opacity, atol=1e-5)


def test_articulated_silhouette_follows_the_posed_mesh(capsule_rig_3joint):
    m = capsule_rig_3joint
    field = AnalyticSDFField(capsule_sdf(), color=(0.8, 0.3, 0.2),
                             sharpness=80.0)
    cfg = bent_configuration(m, 0.9)
    cam = Camera.look_at([0.0, 2.3, 0.0], [0, 0, 0], width=48, height=48,
                         focal=60.0, near=0.5, far=5.0)
    out = render_articulated(field, cam, cfg, m, delta=0.06)
    mesh = render_mesh(deformed_vertices(m, cfg), m.faces, cam)
    iou = silhouette_iou(out.opacity > 0.5, mesh.opacity > 0.5)
    assert iou > 0.9


def test_masked_samples_keep_transmittance(capsule_rig_1joint):
    # a translated copy: rays through the old location must stay empty and
    # show pure background rather than stale density
    m = capsule_rig_1joint
    field = AnalyticSDFField(capsule_sdf(), color=(0.8, 0.3, 0.2),
                             sharpness=80.0)
    cfg = BodyConfiguration(np.zeros((1, 3)), np.zeros(2),
                            np.array([1.0, 0.0, 0.0]))
    art = ArticulatedField(m, cfg, delta=0.06)
    cam = Camera.look_at([0.0, 2.3, 0.0], [0, 0, 0], width=32, height=32,
                         focal=40.0, near=0.5, far=5.0)
    out = art.render(field, cam, background="white", n_samples=64,
                     clip_aabb=(np.array([-2.0, -2, -2]),
                                np.array([2.0, 2, 2])))
    # the canonical location projects near the image center; it must be empty
    assert out.opacity[16, 16] < 1e-3
    np.testing.assert_allclose(out.rgb[16, 16], [1, 1, 1], atol=1e-5)
