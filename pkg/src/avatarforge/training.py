"""The two training procedures.

(A) Template reconstruction: fit the implicit field to multi-view ray-cast
    renders of the bare rig mesh (photometric L2 + Eikonal).
(B) Guided generation: per step, sample a bounding box and camera, render at
    the stage resolution with a random background, upsample to the oracle's
    input size, apply the oracle's per-pixel gradient, and regularize with
    the silhouette loss against the frozen template plus the Eikonal term.
    Runs coarse then fine (doubled resolution) with body and face boxes.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .body import BodyConfiguration, RiggedBodyModel, deformed_vertices
from .field import ImplicitAvatarField
from .guidance import GuidanceContext, TransportError
from .meshrender import render_mesh
from .renderer import (BACKGROUND_POLICIES, Camera, background_image,
                       ray_aabb_clip, render_image, render_rays_field,
                       render_rays_opacity, stratified_samples)

# field hyperparameters sized for CPU-scale experiments
DESK_FIELD_KWARGS = dict(num_levels=8, base_resolution=16,
                         per_level_scale=1.45, table_size=2 ** 15,
                         feature_dim=2, hidden_dim=64, geo_feat_dim=15)


class TrainingError(RuntimeError):
    pass


def psnr(a, b, peak=1.0) -> float:
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    if mse == 0:
        return float("inf")
    return 10.0 * math.log10(peak ** 2 / mse)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

@dataclass
class LossWeights:
    lambda_sil: float = 1.0
    lambda_eik: float = 0.1
    lambda_mock: float = 1.0

    def __post_init__(self):
        if min(self.lambda_sil, self.lambda_eik, self.lambda_mock) < 0:
            raise ValueError("loss weights must be nonnegative")


def silhouette_loss(opacity_template: torch.Tensor,
                    opacity_current: torch.Tensor) -> torch.Tensor:
    """Mean absolute opacity difference; the template map is frozen."""
    if opacity_template.shape != opacity_current.shape:
        raise ValueError("opacity maps must share a shape")
    return (opacity_template.detach() - opacity_current).abs().mean()


def eikonal_loss(field, points: torch.Tensor) -> torch.Tensor:
    """Mean of (||grad f|| - 1)^2 over sample points."""
    _, grad = field.sdf(points, with_gradient=True, check_domain=False)
    return ((grad.norm(dim=-1) - 1.0) ** 2).mean()


def sample_eikonal_points(aabb_min, aabb_max, n_uniform, rng,
                          surface_points=None, n_surface=0, sigma=0.03):
    """Uniform box samples plus Gaussian-perturbed near-surface samples."""
    lo = np.asarray(aabb_min, np.float64)
    hi = np.asarray(aabb_max, np.float64)
    pts = rng.uniform(lo, hi, size=(n_uniform, 3))
    if surface_points is not None and n_surface > 0:
        idx = rng.integers(0, len(surface_points), size=n_surface)
        near = surface_points[idx] + rng.normal(0, sigma, size=(n_surface, 3))
        pts = np.concatenate([pts, np.clip(near, lo, hi)], axis=0)
    return pts


# ---------------------------------------------------------------------------
# scene boxes and camera sampling
# ---------------------------------------------------------------------------

@dataclass
class SceneBoxes:
    body_min: np.ndarray
    body_max: np.ndarray
    face_min: np.ndarray
    face_max: np.ndarray

    @classmethod
    def from_model(cls, model: RiggedBodyModel, head_fraction=0.15,
                   neck_margin=0.05, pad=0.08) -> "SceneBoxes":
        v = model.template_vertices
        body_min, body_max = v.min(axis=0) - pad, v.max(axis=0) + pad
        z_lo = v[:, 2].max() - (head_fraction * model.canonical_height
                                + neck_margin)
        head = v[v[:, 2] >= z_lo]
        face_min = np.maximum(head.min(axis=0) - pad, body_min)
        face_max = np.minimum(head.max(axis=0) + pad, body_max)
        return cls(body_min, body_max, face_min, face_max)

    def box(self, name: str):
        if name == "body":
            return self.body_min, self.body_max
        if name == "face":
            return self.face_min, self.face_max
        raise KeyError(name)


class CameraSampler:
    """Random cameras looking at a box center.

    Elevation ~ U(-pi/6, pi/6); azimuth ~ U((-pi/3, pi/3) U (2pi/3, 4pi/3));
    distance ~ U(2.0, 2.2). The focal length is fit per draw so the box
    fills the frame.
    """

    def __init__(self, box_min, box_max, image_size, seed=0,
                 distance_range=(2.0, 2.2), fill=1.25):
        self.center = (np.asarray(box_min) + np.asarray(box_max)) / 2.0
        self.radius = float(np.linalg.norm(
            np.asarray(box_max) - np.asarray(box_min)) / 2.0)
        self.image_size = image_size
        self.distance_range = distance_range
        self.fill = fill
        self.rng = np.random.default_rng(seed)

    def draw_angles(self):
        elev = self.rng.uniform(-np.pi / 6, np.pi / 6)
        if self.rng.uniform() < 0.5:
            azim = self.rng.uniform(-np.pi / 3, np.pi / 3) % (2 * np.pi)
        else:
            azim = self.rng.uniform(2 * np.pi / 3, 4 * np.pi / 3)
        dist = self.rng.uniform(*self.distance_range)
        return elev, azim, dist

    def camera(self, elev, azim, dist, image_size=None) -> Camera:
        size = image_size or self.image_size
        eye = self.center + dist * np.array([
            math.cos(azim) * math.cos(elev),
            math.sin(azim) * math.cos(elev),
            math.sin(elev)])
        tan_half = self.fill * self.radius / dist
        focal = 0.5 * size / tan_half
        return Camera.look_at(eye, self.center, width=size, height=size,
                              focal=focal, near=max(0.05, dist - 2 * self.radius),
                              far=dist + 2 * self.radius)

    def draw(self, image_size=None):
        elev, azim, dist = self.draw_angles()
        return self.camera(elev, azim, dist, image_size), azim


# ---------------------------------------------------------------------------
# (A) template reconstruction
# ---------------------------------------------------------------------------

def _flatten_view(camera, out):
    origins, dirs = camera.ray_grid(1)
    return (origins.reshape(-1, 3), dirs.reshape(-1, 3),
            out.rgb.reshape(-1, 3).astype(np.float64))


def reconstruct_template(model: RiggedBodyModel, views=50, resolution=96,
                         steps=5000, holdout=5, batch_rays=384, n_samples=32,
                         lr=5e-3, lr_decay=0.05, lambda_eik=0.01, seed=0,
                         field=None, field_kwargs=None, log=None,
                         eval_samples=96):
    """Fit a fresh field to ray-cast flat-shaded renders of the canonical
    mesh. Returns (field, held-out PSNR in dB)."""
    rng = np.random.default_rng(seed)
    if field is None:
        kwargs = dict(DESK_FIELD_KWARGS)
        kwargs.update(field_kwargs or {})
        field = ImplicitAvatarField(seed=seed, **kwargs)
    dtype = next(field.parameters()).dtype

    boxes = SceneBoxes.from_model(model)
    sampler = CameraSampler(boxes.body_min, boxes.body_max, resolution,
                            seed=seed)
    cams = [sampler.draw()[0] for _ in range(views)]
    targets = [render_mesh(model.template_vertices, model.faces, cam,
                           shading="flat", background="white", supersample=4)
               for cam in cams]
    train_cams, eval_cams = cams[holdout:], cams[:holdout]
    train_targets, eval_targets = targets[holdout:], targets[:holdout]

    flat = [_flatten_view(c, t) for c, t in zip(train_cams, train_targets)]
    origins = np.concatenate([f[0] for f in flat])
    dirs = np.concatenate([f[1] for f in flat])
    colors = np.concatenate([f[2] for f in flat])

    pad = 0.15
    box_lo = model.template_vertices.min(axis=0) - pad
    box_hi = model.template_vertices.max(axis=0) + pad
    near, far, hit = ray_aabb_clip(origins, dirs, box_lo, box_hi,
                                   cams[0].near, cams[0].far)
    # rays missing the body are still trained (they must stay transparent)
    far = np.where(hit, far, near + 1e-3)

    o_t = torch.as_tensor(origins, dtype=dtype)
    d_t = torch.as_tensor(dirs, dtype=dtype)
    c_t = torch.as_tensor(colors, dtype=dtype)
    near_t, far_t = near, far

    params = (field.geometry_parameters() + field.color_parameters()
              + [field.log_s])
    opt = torch.optim.Adam(params, lr=lr)
    # exponential decay toward lr * lr_decay over the run
    sched = torch.optim.lr_scheduler.LambdaLR(
        opt, lambda step: lr_decay ** (step / max(steps, 1)))
    surface = model.template_vertices
    white = torch.ones(3, dtype=dtype)

    if steps > 0 and log is not None:
        log.write({"event": "reconstruct_start", "views": views,
                   "resolution": resolution, "steps": steps})
    t0 = time.time()
    for step in range(steps):
        idx = rng.integers(0, len(origins), size=batch_rays)
        idx_hit = idx[hit[idx]]
        # bias the batch toward rays that intersect the body box
        if len(idx_hit) < batch_rays // 2:
            extra = rng.choice(np.flatnonzero(hit), size=batch_rays // 2)
            idx = np.concatenate([idx, extra])
        t_vals = stratified_samples(near_t[idx], far_t[idx], n_samples,
                                    jitter=True, rng=rng)
        rgb, _, _ = render_rays_field(
            field, o_t[idx], d_t[idx],
            torch.as_tensor(t_vals, dtype=dtype),
            white.expand(len(idx), 3))
        photometric = ((rgb - c_t[idx]) ** 2).mean()
        pts = sample_eikonal_points(box_lo, box_hi, 128, rng,
                                    surface_points=surface, n_surface=128)
        eik = eikonal_loss(field, torch.as_tensor(pts, dtype=dtype))
        loss = photometric + lambda_eik * eik
        if not torch.isfinite(loss):
            raise TrainingError(f"loss diverged (non-finite) at step {step}")
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        if log is not None and (step % 250 == 0 or step == steps - 1):
            log.write({"event": "reconstruct_step", "step": step,
                       "photometric": photometric.item(),
                       "eikonal": eik.item(),
                       "sharpness": field.sharpness_s.item(),
                       "elapsed_s": time.time() - t0})

    # held-out PSNR
    vals = []
    for cam, target in zip(eval_cams, eval_targets):
        out = render_image(field, cam, background="white",
                           n_samples=eval_samples,
                           clip_aabb=(box_lo, box_hi))
        vals.append(psnr(out.rgb, target.rgb))
    return field, float(np.mean(vals)) if vals else float("nan")


# ---------------------------------------------------------------------------
# (B) guided generation
# ---------------------------------------------------------------------------

@dataclass
class StageSchedule:
    name: str
    resolution: int
    epochs: int
    body_captures: int
    head_captures: int


@dataclass
class TrainingSchedule:
    coarse: StageSchedule
    fine: StageSchedule
    learning_rate: float = 5e-3
    # geometry starts from a converged template while color starts from
    # scratch, so the geometry group trains at a reduced rate
    geometry_lr_scale: float = 0.2
    oracle_size: int = None   # defaults to the fine resolution
    n_samples: int = 40

    def __post_init__(self):
        if self.fine.resolution != 2 * self.coarse.resolution:
            raise ValueError("fine resolution must double the coarse one")
        if self.oracle_size is None:
            self.oracle_size = self.fine.resolution

    @classmethod
    def full_default(cls) -> "TrainingSchedule":
        return cls(coarse=StageSchedule("coarse", 64, 40, 100, 20),
                   fine=StageSchedule("fine", 128, 10, 100, 50))

    @classmethod
    def desk_default(cls) -> "TrainingSchedule":
        return cls(coarse=StageSchedule("coarse", 32, 16, 40, 10),
                   fine=StageSchedule("fine", 64, 4, 40, 20))


class DiagnosticsLog:
    """Line-delimited JSON diagnostics; keeps records in memory and
    optionally streams them to a file."""

    def __init__(self, path=None):
        self.records = []
        self._fh = open(path, "w") if path else None

    def write(self, record: dict):
        self.records.append(record)
        if self._fh:
            self._fh.write(json.dumps(record) + "\n")
            self._fh.flush()

    def close(self):
        if self._fh:
            self._fh.close()
            self._fh = None


def _draw_background(rng, size):
    policy = BACKGROUND_POLICIES[rng.integers(0, len(BACKGROUND_POLICIES))]
    return policy, background_image(policy, (size, size), rng=rng)


def generation_step(field, template, oracle, stage: StageSchedule,
                    schedule: TrainingSchedule, boxes: SceneBoxes,
                    samplers: dict, weights: LossWeights, opt, rng,
                    box_name: str, prompt: str, clip_box, surface_points,
                    log=None, step_index=0):
    """One optimization step; returns diagnostics (or None if skipped)."""
    dtype = next(field.parameters()).dtype
    sampler = samplers[box_name]
    stride = max(1, schedule.oracle_size // stage.resolution)
    cam, azim = sampler.draw(image_size=stage.resolution * stride)
    policy, bg = _draw_background(rng, stage.resolution)

    origins, dirs = cam.ray_grid(stride)
    h, w = dirs.shape[:2]
    near, far, hit = ray_aabb_clip(origins.reshape(-1, 3), dirs.reshape(-1, 3),
                                   clip_box[0], clip_box[1], cam.near, cam.far)
    far = np.where(hit, far, near + 1e-3)
    t_vals = stratified_samples(near, far, schedule.n_samples,
                                jitter=True, rng=rng)
    o_t = torch.as_tensor(origins.reshape(-1, 3), dtype=dtype)
    d_t = torch.as_tensor(dirs.reshape(-1, 3), dtype=dtype)
    t_t = torch.as_tensor(t_vals, dtype=dtype)
    bg_t = torch.as_tensor(bg.reshape(-1, 3), dtype=dtype)

    rgb, opacity, _ = render_rays_field(field, o_t, d_t, t_t, bg_t)
    image = rgb.reshape(h, w, 3)

    # upsample to the oracle input size; gradients flow back through the
    # transpose of the bilinear interpolation
    if stride > 1:
        up = F.interpolate(image.permute(2, 0, 1)[None],
                           size=(schedule.oracle_size, schedule.oracle_size),
                           mode="bilinear", align_corners=False)[0].permute(1, 2, 0)
    else:
        up = image

    context = GuidanceContext(prompt=prompt, view_azimuth=azim,
                              body_part=box_name, seed=int(rng.integers(2 ** 31)),
                              extras={"camera": cam, "stride": stride,
                                      "background": bg,
                                      "oracle_size": schedule.oracle_size})
    try:
        g = oracle.gradient(up.detach().cpu().numpy(), context)
    except TransportError as exc:
        if log is not None:
            log.write({"event": "step_skipped", "step": step_index,
                       "reason": str(exc)})
        return None

    # per-pixel mean so the guidance term and the regularizers live on the
    # same scale regardless of the oracle resolution
    sds_term = (torch.as_tensor(g.grad, dtype=dtype) * up).sum() / (
        up.shape[0] * up.shape[1])

    with torch.no_grad():
        opacity_template = render_rays_opacity(template, o_t, d_t, t_t)
    sil = silhouette_loss(opacity_template, opacity)

    pts = sample_eikonal_points(clip_box[0], clip_box[1], 96, rng,
                                surface_points=surface_points, n_surface=96)
    eik = eikonal_loss(field, torch.as_tensor(pts, dtype=dtype))

    loss = sds_term + weights.lambda_sil * sil + weights.lambda_eik * eik
    if not torch.isfinite(loss):
        raise TrainingError(f"loss diverged (non-finite) at step {step_index}")
    opt.zero_grad()
    loss.backward()
    opt.step()

    diag = {"event": "generation_step", "step": step_index,
            "stage": stage.name, "box": box_name, "background": policy,
            "azimuth": float(azim), "silhouette": sil.item(),
            "eikonal": eik.item(), "sds_term": sds_term.item()}
    if log is not None:
        log.write(diag)
    return diag


def run_generation(template: ImplicitAvatarField, oracle, prompt: str,
                   model: RiggedBodyModel, schedule: TrainingSchedule = None,
                   weights: LossWeights = None, seed=0,
                   train_geometry=True, checkpoint_dir=None, log=None,
                   epoch_callback=None):
    """Coarse stage then fine stage. Returns the generated field.

    The template stays frozen (silhouette targets); optimization covers the
    geometry and color parameter groups of a fresh copy, with a fresh
    optimizer per stage.
    """
    schedule = schedule or TrainingSchedule.desk_default()
    weights = weights or LossWeights()
    rng = np.random.default_rng(seed)

    # working copy; the template itself is never touched
    field = ImplicitAvatarField(**template._hparams)
    field.load_state_dict(template.state_dict())
    for p in template.parameters():
        p.requires_grad_(False)

    boxes = SceneBoxes.from_model(model)
    clip_box = (boxes.body_min, boxes.body_max)
    surface_points = model.template_vertices
    step_index = 0
    box_counts = {"body": 0, "face": 0}

    for stage in (schedule.coarse, schedule.fine):
        samplers = {
            "body": CameraSampler(boxes.body_min, boxes.body_max,
                                  stage.resolution,
                                  seed=int(rng.integers(2 ** 31))),
            "face": CameraSampler(boxes.face_min, boxes.face_max,
                                  stage.resolution,
                                  seed=int(rng.integers(2 ** 31))),
        }
        groups = [{"params": field.color_parameters(),
                   "lr": schedule.learning_rate}]
        if train_geometry:
            groups.append({"params": field.geometry_parameters(),
                           "lr": schedule.learning_rate
                           * schedule.geometry_lr_scale})
        opt = torch.optim.Adam(groups)
        for epoch in range(stage.epochs):
            order = (["body"] * stage.body_captures
                     + ["face"] * stage.head_captures)
            rng.shuffle(order)
            for box_name in order:
                generation_step(field, template, oracle, stage, schedule,
                                boxes, samplers, weights, opt, rng, box_name,
                                prompt, clip_box, surface_points, log=log,
                                step_index=step_index)
                box_counts[box_name] += 1
                step_index += 1
            if log is not None:
                log.write({"event": "epoch_done", "stage": stage.name,
                           "epoch": epoch, "box_counts": dict(box_counts)})
            if epoch_callback is not None:
                epoch_callback(field, stage.name, epoch)
        if checkpoint_dir is not None:
            path = Path(checkpoint_dir) / f"stage_{stage.name}.ckpt"
            field.save(path)
    if log is not None:
        log.write({"event": "generation_done", "steps": step_index,
                   "box_counts": dict(box_counts)})
    return field
