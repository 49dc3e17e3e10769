"""NeuS-style volume rendering: stratified ray sampling with optional pixel
stride, logistic-CDF alpha compositing of SDF samples, accumulated opacity
and expected depth, plus per-pixel depth-test compositing of two renders.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
import torch

EPS_BG = 1e-3
DEPTH_EPS = 1e-8


# ---------------------------------------------------------------------------
# cameras and rays
# ---------------------------------------------------------------------------

@dataclass
class Camera:
    """Pinhole camera. ``rotation`` / ``translation`` map world points into
    the camera frame (x right, y down, z forward)."""
    width: int
    height: int
    focal: float
    rotation: np.ndarray      # (3, 3) world-to-camera
    translation: np.ndarray   # (3,)
    cx: float = None
    cy: float = None
    near: float = 0.05
    far: float = 6.0

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.cx is None:
            self.cx = self.width / 2.0
        if self.cy is None:
            self.cy = self.height / 2.0
        if self.width < 1 or self.height < 1:
            raise ValueError("image dimensions must be >= 1")
        if not self.near < self.far:
            raise ValueError("near must be < far")
        rtr = self.rotation @ self.rotation.T
        if (np.abs(rtr - np.eye(3)).max() > 1e-6
                or abs(np.linalg.det(self.rotation) - 1) > 1e-6):
            raise ValueError("rotation must be orthonormal with det 1")

    @property
    def position(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    @property
    def forward(self) -> np.ndarray:
        return self.rotation.T @ np.array([0.0, 0.0, 1.0])

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 0.0, 1.0), **kwargs) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        target = np.asarray(target, dtype=np.float64)
        fwd = target - eye
        fwd = fwd / np.linalg.norm(fwd)
        up = np.asarray(up, dtype=np.float64)
        right = np.cross(fwd, up)
        if np.linalg.norm(right) < 1e-9:
            up = np.array([0.0, 1.0, 0.0])
            right = np.cross(fwd, up)
        right = right / np.linalg.norm(right)
        down = np.cross(fwd, right)
        rot = np.stack([right, down, fwd], axis=0)
        return cls(rotation=rot, translation=-rot @ eye, **kwargs)

    def ray_grid(self, stride: int = 1):
        """Origins and unit directions for every strided pixel center.
        Returns (origins (h, w, 3), dirs (h, w, 3)) with h = ceil(H/stride)."""
        rows = np.arange(0, self.height, stride)
        cols = np.arange(0, self.width, stride)
        v, u = np.meshgrid(rows + 0.5, cols + 0.5, indexing="ij")
        x = (u - self.cx) / self.focal
        y = (v - self.cy) / self.focal
        dirs_cam = np.stack([x, y, np.ones_like(x)], axis=-1)
        dirs = dirs_cam @ self.rotation  # R^T applied row-wise
        dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
        origins = np.broadcast_to(self.position, dirs.shape).copy()
        return origins, dirs


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_vals: np.ndarray

    def __post_init__(self):
        self.origin = np.asarray(self.origin, dtype=np.float64)
        self.direction = np.asarray(self.direction, dtype=np.float64)
        self.t_vals = np.asarray(self.t_vals, dtype=np.float64)
        if abs(np.linalg.norm(self.direction) - 1) > 1e-6:
            raise ValueError("ray direction must be unit length")
        if np.any(np.diff(self.t_vals) <= 0):
            raise ValueError("t_vals must be strictly increasing")


def stratified_samples(near, far, n, jitter=False, rng=None):
    """n stratified samples in [near, far]; midpoints when jitter is off.
    ``near``/``far`` may be arrays (per-ray)."""
    if n < 2:
        raise ValueError("need at least 2 samples per ray")
    near = np.asarray(near, dtype=np.float64)
    far = np.asarray(far, dtype=np.float64)
    edges = np.linspace(0.0, 1.0, n + 1)
    lo, hi = edges[:-1], edges[1:]
    if jitter:
        if rng is None:
            rng = np.random.default_rng()
        u = rng.uniform(size=near.shape + (n,))
    else:
        u = 0.5
    frac = lo + (hi - lo) * u
    return near[..., None] + (far - near)[..., None] * frac


def sample_ray(camera: Camera, pixel, n: int, stride: int = 1,
               jitter: bool = False, rng=None) -> Ray:
    """Ray through the strided pixel (row, col) with n stratified samples."""
    row, col = pixel
    h = (camera.height + stride - 1) // stride
    w = (camera.width + stride - 1) // stride
    if not (0 <= row < h and 0 <= col < w):
        raise ValueError(f"pixel {pixel} outside strided grid {h}x{w}")
    u = col * stride + 0.5
    v = row * stride + 0.5
    dir_cam = np.array([(u - camera.cx) / camera.focal,
                        (v - camera.cy) / camera.focal, 1.0])
    d = camera.rotation.T @ dir_cam
    d /= np.linalg.norm(d)
    t = stratified_samples(np.float64(camera.near), np.float64(camera.far),
                           n, jitter=jitter, rng=rng)
    return Ray(camera.position, d, t)


def ray_aabb_clip(origins, dirs, aabb_min, aabb_max, near, far):
    """Per-ray [near, far] clipped to the box; rays that miss get near=far."""
    inv = 1.0 / np.where(np.abs(dirs) < 1e-12, 1e-12, dirs)
    t0 = (aabb_min - origins) * inv
    t1 = (aabb_max - origins) * inv
    tmin = np.minimum(t0, t1).max(axis=-1)
    tmax = np.maximum(t0, t1).min(axis=-1)
    lo = np.maximum(tmin, near)
    hi = np.minimum(tmax, far)
    hit = hi > lo
    lo = np.where(hit, lo, near)
    hi = np.where(hit, hi, near)
    return lo, hi, hit


# ---------------------------------------------------------------------------
# NeuS weighting and compositing
# ---------------------------------------------------------------------------

def neus_weights(sdf_values: torch.Tensor, sharpness_s) -> torch.Tensor:
    """Discrete compositing weights from SDF samples along rays.

    ``sdf_values`` has shape (..., n); returns (..., n-1) weights
    w_i = alpha_i * prod_{j<i}(1 - alpha_j) with
    alpha_i = max((sig(s f_i) - sig(s f_{i+1})) / sig(s f_i), 0).
    """
    if isinstance(sharpness_s, torch.Tensor):
        if (sharpness_s <= 0).any():
            raise ValueError("sharpness_s must be positive")
    elif sharpness_s <= 0:
        raise ValueError("sharpness_s must be positive")
    if sdf_values.shape[-1] < 2:
        raise ValueError("need at least 2 samples per ray")
    alphas = neus_alphas(sdf_values, sharpness_s)
    return composite_alphas(alphas)


def neus_alphas(sdf_values: torch.Tensor, sharpness_s) -> torch.Tensor:
    phi = torch.sigmoid(sdf_values * sharpness_s)
    prev, nxt = phi[..., :-1], phi[..., 1:]
    return ((prev - nxt) / prev.clamp_min(1e-12)).clamp_min(0.0)


def composite_alphas(alphas: torch.Tensor) -> torch.Tensor:
    trans = torch.cumprod(
        torch.cat([torch.ones_like(alphas[..., :1]), 1.0 - alphas + 1e-12],
                  dim=-1), dim=-1)[..., :-1]
    return alphas * trans


def composite_rays(weights: torch.Tensor, colors: torch.Tensor,
                   t_vals: torch.Tensor, background: torch.Tensor):
    """rgb / opacity / depth from weights (..., m), colors (..., m, 3),
    t_vals (..., m) and background (..., 3) or (3,)."""
    opacity = weights.sum(dim=-1)
    rgb = (weights[..., None] * colors).sum(dim=-2) \
        + (1.0 - opacity)[..., None] * background
    depth = (weights * t_vals).sum(dim=-1) / opacity.clamp_min(DEPTH_EPS)
    return rgb, opacity, depth


# ---------------------------------------------------------------------------
# background policies
# ---------------------------------------------------------------------------

BACKGROUND_POLICIES = ("white", "black", "noise")


def background_image(policy, shape_hw, rng=None, dtype=np.float32):
    """Per-pixel background for a policy name, an RGB triple, or an array."""
    h, w = shape_hw
    if isinstance(policy, str):
        if policy == "white":
            return np.ones((h, w, 3), dtype=dtype)
        if policy == "black":
            return np.zeros((h, w, 3), dtype=dtype)
        if policy == "noise":
            if rng is None:
                rng = np.random.default_rng()
            return np.clip(rng.normal(0.5, 0.1, size=(h, w, 3)),
                           0.0, 1.0).astype(dtype)
        raise ValueError(f"unknown background policy {policy!r}")
    arr = np.asarray(policy, dtype=dtype)
    if arr.shape == (3,):
        return np.broadcast_to(arr, (h, w, 3)).copy()
    if arr.shape == (h, w, 3):
        return arr
    raise ValueError(f"bad background shape {arr.shape}")


# ---------------------------------------------------------------------------
# full renders
# ---------------------------------------------------------------------------

@dataclass
class RenderOutput:
    rgb: np.ndarray        # (h, w, 3) in [0, 1]
    opacity: np.ndarray    # (h, w)
    depth: np.ndarray      # (h, w)
    background: np.ndarray  # (h, w, 3)
    bg_flag: np.ndarray = dc_field(default=None)  # (h, w) bool

    def __post_init__(self):
        if self.bg_flag is None:
            self.bg_flag = self.opacity < EPS_BG


def render_rays_opacity(field, origins, dirs, t_vals, chunk=65536):
    """Accumulated opacity only (no color network evaluation)."""
    R, n = t_vals.shape
    out = []
    rows_per_chunk = max(1, chunk // n)
    lo_box, hi_box = field.domain_aabb
    for lo in range(0, R, rows_per_chunk):
        hi = min(R, lo + rows_per_chunk)
        o, d, t = origins[lo:hi], dirs[lo:hi], t_vals[lo:hi]
        pts = (o[:, None, :] + t[..., None] * d[:, None, :]).reshape(-1, 3)
        f = field.sdf(pts.clamp(lo_box, hi_box), check_domain=False)
        alphas = neus_alphas(f.reshape(hi - lo, n), field.sharpness_s)
        out.append(composite_alphas(alphas).sum(dim=-1))
    return torch.cat(out)


def _surface_depth(sdf, t_vals, fallback, mask=None):
    """Depth of the first outside-to-inside SDF sign change along each ray
    (linear interpolation within the interval). Rays without a crossing keep
    the weight-expectation ``fallback``; with an articulation ``mask``, only
    crossings between two unmasked samples count."""
    with torch.no_grad():
        f = sdf.detach()
        crossing = (f[..., :-1] > 0) & (f[..., 1:] <= 0)
        if mask is not None:
            m = mask.detach().reshape(f.shape) > 0
            crossing &= m[..., :-1] & m[..., 1:]
        has = crossing.any(dim=-1)
        idx = crossing.long().argmax(dim=-1)
        rows = torch.arange(f.shape[0], device=f.device)
        f0 = f[rows, idx]
        f1 = f[rows, idx + 1]
        t0 = t_vals[rows, idx]
        t1 = t_vals[rows, idx + 1]
        frac = f0 / (f0 - f1).clamp_min(1e-12)
        return torch.where(has, t0 + frac * (t1 - t0), fallback)


def render_rays_field(field, origins, dirs, t_vals, background,
                      chunk=65536, warp=None):
    """Differentiable core: torch rendering of flat ray batches.

    origins/dirs (R, 3), t_vals (R, n), background (R, 3) — all torch.
    ``warp`` optionally maps sample points (P, 3) -> (points, alpha_mask)
    before field evaluation (used by articulated rendering).
    """
    R, n = t_vals.shape
    rgb_out, opa_out, dep_out = [], [], []
    rows_per_chunk = max(1, chunk // n)
    for lo in range(0, R, rows_per_chunk):
        hi = min(R, lo + rows_per_chunk)
        o, d, t = origins[lo:hi], dirs[lo:hi], t_vals[lo:hi]
        pts = o[:, None, :] + t[..., None] * d[:, None, :]
        flat = pts.reshape(-1, 3)
        mask = None
        if warp is not None:
            flat, mask = warp(flat)
        lo_box, hi_box = field.domain_aabb
        flat = flat.clamp(lo_box, hi_box)
        dflat = d[:, None, :].expand(-1, n, -1).reshape(-1, 3)
        f, c = field.evaluate(flat, dflat, check_domain=False)
        f = f.reshape(hi - lo, n)
        c = c.reshape(hi - lo, n, 3)
        alphas = neus_alphas(f, field.sharpness_s)
        if mask is not None:
            alphas = alphas * mask.reshape(hi - lo, n)[..., :-1]
        weights = composite_alphas(alphas)
        t_mid = 0.5 * (t[..., :-1] + t[..., 1:])
        rgb, opa, dep = composite_rays(weights, c[..., :-1, :], t_mid,
                                       background[lo:hi])
        dep = _surface_depth(f, t, dep, mask)
        rgb_out.append(rgb)
        opa_out.append(opa)
        dep_out.append(dep)
    return (torch.cat(rgb_out), torch.cat(opa_out), torch.cat(dep_out))


def render_pixel(field, ray: Ray, background):
    """(rgb, opacity, depth) for a single prepared ray."""
    dtype = next(field.parameters()).dtype
    o = torch.as_tensor(ray.origin, dtype=dtype)[None]
    d = torch.as_tensor(ray.direction, dtype=dtype)[None]
    t = torch.as_tensor(ray.t_vals, dtype=dtype)[None]
    bg = torch.as_tensor(np.asarray(background, dtype=np.float64),
                         dtype=dtype).reshape(1, 3)
    with torch.no_grad():
        rgb, opa, dep = render_rays_field(field, o, d, t, bg)
    return (rgb[0].numpy().astype(np.float64),
            float(opa[0]), float(dep[0]))


def render_image(field, camera: Camera, stride: int = 1, background="white",
                 n_samples: int = 96, jitter: bool = False, seed: int = 0,
                 warp=None, chunk=65536, clip_aabb=None) -> RenderOutput:
    """Render the full (strided) pixel grid. Deterministic given seed.
    Sample ranges are clipped to ``clip_aabb`` (defaults to the field's
    domain box)."""
    rng = np.random.default_rng(seed)
    origins, dirs = camera.ray_grid(stride)
    h, w = dirs.shape[:2]
    if clip_aabb is None:
        lo_t, hi_t = field.domain_aabb
        lo_box = lo_t.numpy().astype(np.float64)
        hi_box = hi_t.numpy().astype(np.float64)
    else:
        lo_box, hi_box = (np.asarray(b, np.float64) for b in clip_aabb)
    near, far, _ = ray_aabb_clip(
        origins.reshape(-1, 3), dirs.reshape(-1, 3),
        lo_box, hi_box, camera.near, camera.far)
    t_vals = stratified_samples(near, np.maximum(far, near + 1e-6),
                                n_samples, jitter=jitter, rng=rng)
    bg = background_image(background, (h, w), rng=rng)
    dtype = next(field.parameters()).dtype
    with torch.no_grad():
        rgb, opa, dep = render_rays_field(
            field,
            torch.as_tensor(origins.reshape(-1, 3), dtype=dtype),
            torch.as_tensor(dirs.reshape(-1, 3), dtype=dtype),
            torch.as_tensor(t_vals, dtype=dtype),
            torch.as_tensor(bg.reshape(-1, 3), dtype=dtype),
            chunk=chunk, warp=warp)
    return RenderOutput(
        rgb=rgb.reshape(h, w, 3).numpy().astype(np.float32),
        opacity=opa.reshape(h, w).numpy().astype(np.float32),
        depth=dep.reshape(h, w).numpy().astype(np.float32),
        background=bg)


def composite_outputs(avatar: RenderOutput, scene: RenderOutput,
                      tau_occ: float = 0.5) -> RenderOutput:
    """Occlusion-aware merge of two renders of the same camera: where both
    are occupied the smaller expected depth wins; where one is occupied it
    wins; otherwise both are alpha-blended over the avatar background."""
    if avatar.rgb.shape != scene.rgb.shape:
        raise ValueError("renders must share a resolution")
    a_occ = avatar.opacity > tau_occ
    s_occ = scene.opacity > tau_occ
    take_scene = (a_occ & s_occ & (scene.depth < avatar.depth)) | (~a_occ & s_occ)

    rgb = np.where(take_scene[..., None], scene.rgb, avatar.rgb)
    opacity = np.where(take_scene, scene.opacity, avatar.opacity)
    depth = np.where(take_scene, scene.depth, avatar.depth)

    neither = ~a_occ & ~s_occ
    if neither.any():
        # front-to-back blend of the two thin layers over the background
        a_first = avatar.depth <= scene.depth
        o1 = np.where(a_first, avatar.opacity, scene.opacity)
        o2 = np.where(a_first, scene.opacity, avatar.opacity)
        c1 = np.where(a_first[..., None], avatar.rgb - (1 - avatar.opacity[..., None]) * avatar.background,
                      scene.rgb - (1 - scene.opacity[..., None]) * scene.background)
        c2 = np.where(a_first[..., None], scene.rgb - (1 - scene.opacity[..., None]) * scene.background,
                      avatar.rgb - (1 - avatar.opacity[..., None]) * avatar.background)
        blend = c1 + (1 - o1[..., None]) * c2 \
            + ((1 - o1) * (1 - o2))[..., None] * avatar.background
        total = o1 + (1 - o1) * o2
        rgb = np.where(neither[..., None], blend, rgb)
        opacity = np.where(neither, total, opacity)
        depth = np.where(neither, np.minimum(avatar.depth, scene.depth), depth)

    return RenderOutput(rgb=np.clip(rgb, 0, 1), opacity=opacity, depth=depth,
                        background=avatar.background)


def composite_render(field, scene_handle, camera: Camera, alignment=None,
                     tau_occ: float = 0.5, **render_kwargs) -> RenderOutput:
    """Render avatar and scene independently under ``camera`` and merge by
    depth test. ``scene_handle`` must expose render(camera, **kw) ->
    RenderOutput; ``alignment`` (4x4 world transform of the avatar, identity
    allowed) must be supplied explicitly."""
    if alignment is None:
        raise ValueError("composite rendering requires an alignment transform")
    alignment = np.asarray(alignment, dtype=np.float64)
    cam_avatar = camera
    if not np.allclose(alignment, np.eye(4)):
        # render the avatar in its own frame by moving the camera
        inv = np.linalg.inv(alignment)
        rot = camera.rotation @ alignment[:3, :3]
        trans = camera.rotation @ alignment[:3, 3] + camera.translation
        cam_avatar = Camera(width=camera.width, height=camera.height,
                            focal=camera.focal, rotation=rot,
                            translation=trans, cx=camera.cx, cy=camera.cy,
                            near=camera.near, far=camera.far)
        del inv
    avatar_out = render_image(field, cam_avatar, **render_kwargs)
    scene_out = scene_handle.render(camera, **render_kwargs)
    return composite_outputs(avatar_out, scene_out, tau_occ=tau_occ)


class EmptyScene:
    """Scene handle with nothing in it."""

    def render(self, camera: Camera, stride=1, background="white",
               n_samples=96, jitter=False, seed=0, **_) -> RenderOutput:
        h = (camera.height + stride - 1) // stride
        w = (camera.width + stride - 1) // stride
        bg = background_image(background, (h, w), rng=np.random.default_rng(seed))
        return RenderOutput(rgb=bg.copy(), opacity=np.zeros((h, w), np.float32),
                            depth=np.full((h, w), camera.far, np.float32),
                            background=bg)


class AnalyticSphereScene:
    """Exact ray-traced scene of opaque colored spheres (occupancy-style)."""

    def __init__(self, spheres):
        # spheres: list of dicts {center, radius, color}
        self.spheres = [(np.asarray(s["center"], np.float64),
                         float(s["radius"]),
                         np.asarray(s["color"], np.float64)) for s in spheres]

    def render(self, camera: Camera, stride=1, background="white",
               n_samples=96, jitter=False, seed=0, **_) -> RenderOutput:
        origins, dirs = camera.ray_grid(stride)
        h, w = dirs.shape[:2]
        bg = background_image(background, (h, w), rng=np.random.default_rng(seed))
        depth = np.full((h, w), camera.far, np.float64)
        rgb = bg.astype(np.float64).copy()
        opacity = np.zeros((h, w), np.float64)
        for center, radius, color in self.spheres:
            oc = origins - center
            b = np.sum(oc * dirs, axis=-1)
            c = np.sum(oc * oc, axis=-1) - radius ** 2
            disc = b * b - c
            t = -b - np.sqrt(np.maximum(disc, 0.0))
            hit = (disc > 0) & (t > camera.near) & (t < depth)
            depth = np.where(hit, t, depth)
            rgb = np.where(hit[..., None], color, rgb)
            opacity = np.where(hit, 1.0, opacity)
        return RenderOutput(rgb=rgb.astype(np.float32),
                            opacity=opacity.astype(np.float32),
                            depth=depth.astype(np.float32), background=bg)


# ---------------------------------------------------------------------------
# image / map export
# ---------------------------------------------------------------------------

def save_png(path, image) -> None:
    from PIL import Image
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    Image.fromarray((arr * 255 + 0.5).astype(np.uint8)).save(path)


def save_float_map(path, array) -> None:
    """32-bit float little-endian row-major dump + JSON sidecar with dims."""
    path = Path(path)
    arr = np.ascontiguousarray(np.asarray(array, dtype="<f4"))
    path.write_bytes(arr.tobytes())
    sidecar = path.with_suffix(path.suffix + ".json")
    sidecar.write_text(json.dumps({"dtype": "float32", "shape": list(arr.shape),
                                   "byte_order": "little", "order": "row-major"}))


def load_float_map(path):
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    arr = np.frombuffer(path.read_bytes(), dtype="<f4")
    return arr.reshape(meta["shape"]).copy()
