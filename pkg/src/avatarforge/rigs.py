"""Synthetic test rigs (capsule bodies with 1-3 joints) and analytic SDF
fields used as ground truth in tests and experiments.

The capsule is axis-aligned with z (the canonical "up"), centered at the
origin, and fits well inside the default [-1, 1]^3 domain box.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

from .body import RiggedBodyModel


def capsule_mesh(radius=0.22, height=1.2, segments=24, rings=12):
    """Triangulated capsule along z centered at the origin.

    ``height`` is tip-to-tip; the cylindrical part spans
    [-(height/2 - radius), height/2 - radius].
    """
    half = height / 2.0 - radius
    if half <= 0:
        raise ValueError("height must exceed the diameter")
    verts = []
    # bottom pole .. bottom hemisphere .. cylinder .. top hemisphere .. top pole
    verts.append([0.0, 0.0, -half - radius])
    lat_rows = []
    for i in range(1, rings):
        ang = np.pi / 2 * i / rings
        z = -half - radius * np.cos(ang)
        r = radius * np.sin(ang)
        lat_rows.append((r, z))
    # subdivide the cylindrical section so skinning varies smoothly
    # between rings (side triangles must stay locally rigid under LBS)
    for z in np.linspace(-half, half, max(2, rings + 1)):
        lat_rows.append((radius, z))
    for i in range(rings - 1, 0, -1):
        ang = np.pi / 2 * i / rings
        lat_rows.append((radius * np.sin(ang), half + radius * np.cos(ang)))
    for r, z in lat_rows:
        for s in range(segments):
            th = 2 * np.pi * s / segments
            verts.append([r * np.cos(th), r * np.sin(th), z])
    verts.append([0.0, 0.0, half + radius])
    verts = np.asarray(verts, np.float64)

    faces = []
    nrows = len(lat_rows)
    row0 = 1  # index of first ring vertex
    # bottom cap fan
    for s in range(segments):
        faces.append([0, row0 + (s + 1) % segments, row0 + s])
    for i in range(nrows - 1):
        a = row0 + i * segments
        b = row0 + (i + 1) * segments
        for s in range(segments):
            s1 = (s + 1) % segments
            faces.append([a + s, a + s1, b + s])
            faces.append([a + s1, b + s1, b + s])
    top = len(verts) - 1
    last = row0 + (nrows - 1) * segments
    for s in range(segments):
        faces.append([top, last + s, last + (s + 1) % segments])
    return verts, np.asarray(faces, np.int32)


def _girth_blendshape(verts, radius):
    """Displacement that uniformly scales girth: radial push in xy."""
    xy = verts[:, :2]
    norm = np.linalg.norm(xy, axis=1, keepdims=True)
    direction = np.where(norm > 1e-9, xy / np.maximum(norm, 1e-9), 0.0)
    disp = np.zeros_like(verts)
    disp[:, :2] = direction * radius * 0.5
    return disp


def _height_blendshape(verts):
    disp = np.zeros_like(verts)
    disp[:, 2] = verts[:, 2] * 0.15
    return disp


def make_capsule_rig(num_joints=1, radius=0.22, height=1.2,
                     segments=24, rings=12) -> RiggedBodyModel:
    """Capsule rig with a vertical joint chain and smooth skinning.

    num_joints=1: a single root at the origin (whole body rigid).
    num_joints=3: chain at z = -height/4, 0, +height/4 with linear-falloff
    weights, suitable for bend tests and forward-kinematics oracles.
    """
    verts, faces = capsule_mesh(radius, height, segments, rings)
    n = len(verts)
    if num_joints == 1:
        joints = np.zeros((1, 3))
        parents = np.array([-1], np.int32)
        weights = np.ones((n, 1))
    else:
        zs = np.linspace(-height / 4, height / 4, num_joints)
        joints = np.stack([np.zeros_like(zs), np.zeros_like(zs), zs], axis=1)
        parents = np.arange(-1, num_joints - 1, dtype=np.int32)
        # hat-function weights in z, normalized rows
        weights = np.zeros((n, num_joints))
        span = zs[1] - zs[0]
        for j, zj in enumerate(zs):
            weights[:, j] = np.clip(1.0 - np.abs(verts[:, 2] - zj) / span, 0, None)
        # vertices beyond the chain ends follow the end joints
        weights[verts[:, 2] <= zs[0], 0] = 1.0
        weights[verts[:, 2] >= zs[-1], -1] = 1.0
        weights /= weights.sum(axis=1, keepdims=True)
    shape_dirs = np.stack([_girth_blendshape(verts, radius),
                           _height_blendshape(verts)], axis=2)
    return RiggedBodyModel(template_vertices=verts, faces=faces,
                           joints=joints, parents=parents,
                           skinning_weights=weights, shape_dirs=shape_dirs,
                           name=f"capsule{num_joints}")


def face_colors(model: RiggedBodyModel, seed=0, high_frequency=False):
    """Deterministic per-face RGB texture for the mock-guidance targets."""
    rng = np.random.default_rng(seed)
    m = len(model.faces)
    if high_frequency:
        # independent saturated color per face
        return rng.uniform(0.05, 0.95, size=(m, 3))
    centers = model.template_vertices[model.faces].mean(axis=1)
    z = centers[:, 2]
    zn = (z - z.min()) / max(np.ptp(z), 1e-9)
    theta = np.arctan2(centers[:, 1], centers[:, 0]) / (2 * np.pi) + 0.5
    colors = np.stack([zn, 0.3 + 0.5 * theta, 1.0 - zn], axis=1)
    return np.clip(colors + rng.normal(0, 0.02, size=(m, 3)), 0, 1)


# ---------------------------------------------------------------------------
# analytic SDF fields (renderer-compatible)
# ---------------------------------------------------------------------------

class AnalyticSDFField(nn.Module):
    """Closed-form SDF + color packaged with the field interface the
    renderer consumes (evaluate / sdf / sharpness_s / domain_aabb)."""

    def __init__(self, sdf_fn, color=(1.0, 0.0, 0.0), sharpness=64.0,
                 aabb_min=(-1.0, -1.0, -1.0), aabb_max=(1.0, 1.0, 1.0)):
        super().__init__()
        self.sdf_fn = sdf_fn
        self._anchor = nn.Parameter(torch.zeros(1))  # dtype/device carrier
        self.register_buffer("aabb_min", torch.tensor(aabb_min))
        self.register_buffer("aabb_max", torch.tensor(aabb_max))
        self.register_buffer("base_color", torch.tensor(color, dtype=torch.float32))
        self.sharpness = float(sharpness)

    @property
    def sharpness_s(self):
        return torch.tensor(self.sharpness)

    @property
    def domain_aabb(self):
        return self.aabb_min, self.aabb_max

    def sdf(self, x, with_gradient=False, check_domain=True):
        if not with_gradient:
            return self.sdf_fn(x)
        x = x.detach().requires_grad_(True)
        f = self.sdf_fn(x)
        grad = torch.autograd.grad(f, x, torch.ones_like(f),
                                   create_graph=True)[0]
        return f, grad

    def evaluate(self, x, d, check_domain=True):
        f = self.sdf_fn(x)
        rgb = self.base_color.to(x.dtype).expand(*f.shape, 3)
        return f, rgb


def sphere_sdf(center=(0.0, 0.0, 0.0), radius=1.0):
    center_t = torch.tensor(center, dtype=torch.float64)

    def fn(x):
        return (x - center_t.to(x.dtype)).norm(dim=-1) - radius
    return fn


def capsule_sdf(radius=0.22, height=1.2, rotation=None, translation=None):
    """SDF of the canonical capsule, optionally rigidly moved (rotation 3x3,
    translation 3-vector applied to the shape; points are pulled back)."""
    half = height / 2.0 - radius
    rot = None if rotation is None else torch.as_tensor(rotation, dtype=torch.float64)
    trans = None if translation is None else torch.as_tensor(translation, dtype=torch.float64)

    def fn(x):
        p = x
        if trans is not None:
            p = p - trans.to(x.dtype)
        if rot is not None:
            p = p @ rot.to(x.dtype)  # R^{-1} p as row vectors
        z = p[..., 2].clamp(-half, half)
        closest = torch.stack([torch.zeros_like(z), torch.zeros_like(z), z], -1)
        return (p - closest).norm(dim=-1) - radius
    return fn
