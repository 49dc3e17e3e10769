import json
import math

import numpy as np
import pytest
import torch

from avatarforge.field import ImplicitAvatarField
from avatarforge.guidance import MockGuidance, TransportError
from avatarforge.rigs import make_capsule_rig, sphere_sdf
from avatarforge.training import (CameraSampler, DiagnosticsLog, LossWeights,
                                  SceneBoxes, StageSchedule, TrainingSchedule,
                                  eikonal_loss, psnr, run_generation,
                                  sample_eikonal_points, silhouette_loss)
from tests.conftest import TINY_FIELD_KWARGS


class _AnalyticSDF:
    def __init__(self, fn):
        self.fn = fn

    def sdf(self, x, with_gradient=False, check_domain=True):
        x = x.detach().requires_grad_(True)
        f = self.fn(x)
        grad = torch.autograd.grad(f, x, torch.ones_like(f))[0]
        return f, grad


def test_psnr_values():
    a = np.zeros((4, 4, 3))
    assert psnr(a, a) == float("inf")
    b = a + 0.1
    assert psnr(a, b) == pytest.approx(20.0, abs=1e-9)


def test_loss_weights_validation():
    LossWeights(0.0, 0.0, 0.0)
    with pytest.raises(ValueError):
        LossWeights(lambda_sil=-1.0)


def test_silhouette_loss_value_and_detach():
    tpl = torch.tensor([0.0, 1.0, 0.5], requires_grad=True)
    cur = torch.tensor([1.0, 1.0, 0.0], requires_grad=True)
    loss = silhouette_loss(tpl, cur)
    assert loss.item() == pytest.approx(0.5)
    loss.backward()
    assert tpl.grad is None          # the template map is frozen
    assert cur.grad is not None
    with pytest.raises(ValueError):
        silhouette_loss(torch.zeros(4), torch.zeros(5))


def test_eikonal_on_analytic_sdfs(rng):
    pts = torch.as_tensor(rng.uniform(-1, 1, size=(256, 3)))
    exact = _AnalyticSDF(sphere_sdf(radius=0.5))
    assert float(eikonal_loss(exact, pts)) < 1e-12
    doubled = _AnalyticSDF(lambda x: 2.0 * sphere_sdf(radius=0.5)(x))
    assert float(eikonal_loss(doubled, pts)) == pytest.approx(1.0, abs=1e-9)


def test_eikonal_point_sampler_bounds(rng):
    lo, hi = np.array([-1.0, -2.0, 0.0]), np.array([1.0, 0.0, 3.0])
    surf = rng.uniform(lo, hi, size=(40, 3))
    pts = sample_eikonal_points(lo, hi, 100, rng, surface_points=surf,
                                n_surface=50)
    assert pts.shape == (150, 3)
    assert (pts >= lo).all() and (pts <= hi).all()


def test_scene_boxes_geometry(capsule_rig_3joint):
    boxes = SceneBoxes.from_model(capsule_rig_3joint)
    assert (boxes.body_min < boxes.body_max).all()
    # the face box nests inside the body box and sits at the top
    assert (boxes.face_min >= boxes.body_min - 1e-12).all()
    assert (boxes.face_max <= boxes.body_max + 1e-12).all()
    assert boxes.face_min[2] > 0.0
    np.testing.assert_allclose(boxes.face_max[2], boxes.body_max[2])
    with pytest.raises(KeyError):
        boxes.box("arm")


def test_camera_sampler_supports_and_forbidden_band():
    sampler = CameraSampler([-1, -1, -1], [1, 1, 1], 32, seed=7)
    front = back = 0
    for _ in range(10000):
        elev, azim, dist = sampler.draw_angles()
        assert -np.pi / 6 <= elev <= np.pi / 6
        assert 2.0 <= dist <= 2.2
        assert 0.0 <= azim < 2 * np.pi
        # side bands are never sampled
        assert not (np.pi / 3 < azim < 2 * np.pi / 3)
        assert not (4 * np.pi / 3 < azim < 5 * np.pi / 3)
        if 2 * np.pi / 3 <= azim <= 4 * np.pi / 3:
            front += 1
        else:
            back += 1
    assert front > 4000 and back > 4000


def test_camera_looks_at_box_center():
    sampler = CameraSampler([0, 0, 0], [1, 1, 1], 16, seed=0)
    cam, _ = sampler.draw()
    to_center = sampler.center - cam.position
    to_center /= np.linalg.norm(to_center)
    np.testing.assert_allclose(cam.forward, to_center, atol=1e-9)


def test_schedule_validation():
    TrainingSchedule(StageSchedule("coarse", 32, 1, 1, 1),
                     StageSchedule("fine", 64, 1, 1, 1))
    with pytest.raises(ValueError):
        TrainingSchedule(StageSchedule("coarse", 32, 1, 1, 1),
                         StageSchedule("fine", 48, 1, 1, 1))
    desk = TrainingSchedule.desk_default()
    assert desk.fine.resolution == 2 * desk.coarse.resolution
    assert desk.oracle_size == desk.fine.resolution


def test_diagnostics_log_streams_jsonl(tmp_path):
    path = tmp_path / "diag.jsonl"
    log = DiagnosticsLog(path)
    log.write({"event": "a", "x": 1})
    log.write({"event": "b"})
    log.close()
    lines = [json.loads(l) for l in path.read_text().splitlines()]
    assert lines == log.records == [{"event": "a", "x": 1}, {"event": "b"}]


def _tiny_schedule():
    return TrainingSchedule(StageSchedule("coarse", 8, 1, 2, 1),
                            StageSchedule("fine", 16, 1, 2, 1),
                            n_samples=8)


def test_generation_capture_accounting_and_checkpoints(capsule_rig_3joint,
                                                       tiny_field, tmp_path):
    schedule = _tiny_schedule()
    oracle = MockGuidance(np.full((16, 16, 3), 0.5))
    log = DiagnosticsLog()
    out = run_generation(tiny_field, oracle, "a test subject",
                         capsule_rig_3joint, schedule=schedule, seed=1,
                         checkpoint_dir=tmp_path, log=log)
    assert out is not tiny_field
    done = [r for r in log.records if r["event"] == "generation_done"][0]
    # 2 stages x 1 epoch x (2 body + 1 face) captures
    assert done["box_counts"] == {"body": 4, "face": 2}
    assert done["steps"] == 6
    assert (tmp_path / "stage_coarse.ckpt").exists()
    assert (tmp_path / "stage_fine.ckpt").exists()
    # the template must stay untouched
    ref = ImplicitAvatarField(seed=0, **TINY_FIELD_KWARGS)
    for (k, a), b in zip(tiny_field.state_dict().items(),
                         ref.state_dict().values()):
        assert torch.equal(a, b), k


def test_generation_steps_are_skipped_on_transport_error(capsule_rig_3joint,
                                                         tiny_field):
    class FlakyOracle:
        def __init__(self, inner):
            self.inner = inner
            self.calls = 0

        def gradient(self, rendered, context):
            self.calls += 1
            if self.calls % 2 == 1:
                raise TransportError("http://nowhere", 3, "down")
            return self.inner.gradient(rendered, context)

    oracle = FlakyOracle(MockGuidance(np.full((16, 16, 3), 0.5)))
    log = DiagnosticsLog()
    run_generation(tiny_field, oracle, "a test subject", capsule_rig_3joint,
                   schedule=_tiny_schedule(), seed=1, log=log)
    skipped = [r for r in log.records if r["event"] == "step_skipped"]
    stepped = [r for r in log.records if r["event"] == "generation_step"]
    assert len(skipped) == 3 and len(stepped) == 3
    done = [r for r in log.records if r["event"] == "generation_done"][0]
    assert done["steps"] == 6   # skipped steps still advance the counter


def test_frozen_geometry_leaves_sdf_parameters_unchanged(capsule_rig_3joint,
                                                         tiny_field):
    oracle = MockGuidance(np.full((16, 16, 3), 0.5))
    out = run_generation(tiny_field, oracle, "a test subject",
                         capsule_rig_3joint, schedule=_tiny_schedule(),
                         seed=2, train_geometry=False)
    geo_names = {id(p) for p in out.geometry_parameters()}
    ref = dict(tiny_field.state_dict())
    changed_color = False
    for (name, p), q in zip(out.named_parameters(),
                            tiny_field.named_parameters()):
        if id(p) in geo_names or name == "log_s":
            assert torch.equal(p, q[1]), name
        elif not torch.equal(p, q[1]):
            changed_color = True
    assert changed_color
