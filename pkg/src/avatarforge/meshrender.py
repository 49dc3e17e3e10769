"""Ray-cast renderer for triangle meshes. Produces the multi-view target
images for template reconstruction (flat neutral shading) and the textured
targets for mock guidance (per-face colors), and doubles as an exact
silhouette/depth oracle in tests.
"""

from __future__ import annotations

import numpy as np

from .renderer import Camera, RenderOutput, background_image


def raycast_mesh(origins, dirs, vertices, faces, chunk=512):
    """Nearest hit of rays against all triangles (Moller-Trumbore).

    origins/dirs: (R, 3). Returns (t (R,), face_index (R,) with -1 for miss).
    """
    v0 = vertices[faces[:, 0]]
    e1 = vertices[faces[:, 1]] - v0
    e2 = vertices[faces[:, 2]] - v0
    R = len(origins)
    t_best = np.full(R, np.inf)
    f_best = np.full(R, -1, np.int64)
    for lo in range(0, R, chunk):
        o = origins[lo:lo + chunk][:, None, :]      # (r, 1, 3)
        d = dirs[lo:lo + chunk][:, None, :]
        p = np.cross(d, e2[None])                    # (r, M, 3)
        det = np.einsum("rmk,mk->rm", p, e1)
        valid = np.abs(det) > 1e-12
        inv_det = np.where(valid, 1.0 / np.where(valid, det, 1.0), 0.0)
        s = o - v0[None]
        u = np.einsum("rmk,rmk->rm", s, p) * inv_det
        q = np.cross(s, e1[None])
        v = np.einsum("rmk,rk->rm", q, dirs[lo:lo + chunk]) * inv_det
        t = np.einsum("rmk,mk->rm", q, e2) * inv_det
        hit = valid & (u >= -1e-9) & (v >= -1e-9) & (u + v <= 1 + 1e-9) & (t > 1e-6)
        t = np.where(hit, t, np.inf)
        idx = np.argmin(t, axis=1)
        rows = np.arange(len(idx))
        tmin = t[rows, idx]
        better = tmin < t_best[lo:lo + chunk]
        t_best[lo:lo + chunk] = np.where(better, tmin, t_best[lo:lo + chunk])
        f_best[lo:lo + chunk] = np.where(better, idx, f_best[lo:lo + chunk])
    return t_best, f_best


def face_normals(vertices, faces):
    v0 = vertices[faces[:, 0]]
    n = np.cross(vertices[faces[:, 1]] - v0, vertices[faces[:, 2]] - v0)
    return n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-12)


def _shade(shading, colors, vertices, faces, fidx, d, hit):
    """Per-ray colors for the rays that hit; (R, 3) with zeros on misses."""
    rgb = np.zeros((len(fidx), 3), np.float64)
    if shading == "flat":
        normals = face_normals(vertices, faces)
        ndotd = np.abs(np.einsum("rk,rk->r", normals[fidx[hit]], d[hit]))
        rgb[hit] = (0.25 + 0.65 * ndotd)[:, None]
    elif shading == "colors":
        if colors is None:
            raise ValueError("per-face colors required for shading='colors'")
        rgb[hit] = colors[fidx[hit]]
    else:
        raise ValueError(f"unknown shading mode {shading!r}")
    return rgb


def render_mesh(vertices, faces, camera: Camera, shading="flat",
                colors=None, background="white", stride=1,
                seed=0, supersample=1) -> RenderOutput:
    """Render a mesh with flat neutral (headlight Lambert, gray) shading or
    per-face ``colors`` (M, 3).

    ``supersample`` > 1 antialiases silhouette-boundary pixels by re-casting
    them on an ss x ss subpixel grid and box-filtering (rgb and opacity
    become coverage-weighted averages there; depth averages hit subpixels).
    Interior and background pixels are exact already and are left untouched.
    """
    origins, dirs = camera.ray_grid(stride)
    h, w = dirs.shape[:2]
    o = origins.reshape(-1, 3)
    d = dirs.reshape(-1, 3)
    t, fidx = raycast_mesh(o, d, vertices, faces)
    hit = fidx >= 0
    bg = background_image(background, (h, w), rng=np.random.default_rng(seed))
    rgb = bg.reshape(-1, 3).astype(np.float64).copy()
    shaded = _shade(shading, colors, vertices, faces, fidx, d, hit)
    rgb[hit] = shaded[hit]
    depth = np.where(hit, t, camera.far)
    out = RenderOutput(rgb=rgb.reshape(h, w, 3).astype(np.float32),
                       opacity=hit.reshape(h, w).astype(np.float32),
                       depth=depth.reshape(h, w).astype(np.float32),
                       background=bg)
    if supersample <= 1:
        return out
    if stride != 1:
        raise ValueError("supersampling requires stride 1")
    return _antialias_edges(out, vertices, faces, camera, shading, colors,
                            int(supersample))


def _antialias_edges(out, vertices, faces, camera, shading, colors, ss):
    h, w = out.opacity.shape
    hitm = out.opacity > 0.5
    pad = np.pad(hitm, 1, mode="edge")
    nbr_any = (pad[:-2, 1:-1] | pad[2:, 1:-1] | pad[1:-1, :-2]
               | pad[1:-1, 2:] | hitm)
    nbr_all = (pad[:-2, 1:-1] & pad[2:, 1:-1] & pad[1:-1, :-2]
               & pad[1:-1, 2:] & hitm)
    edge = nbr_any & ~nbr_all
    if not edge.any():
        return out

    big = Camera(width=w * ss, height=h * ss, focal=camera.focal * ss,
                 rotation=camera.rotation, translation=camera.translation,
                 cx=camera.cx * ss, cy=camera.cy * ss,
                 near=camera.near, far=camera.far)
    origins, dirs = big.ray_grid(1)
    origins = origins.reshape(h, ss, w, ss, 3).transpose(0, 2, 1, 3, 4)
    dirs = dirs.reshape(h, ss, w, ss, 3).transpose(0, 2, 1, 3, 4)
    o_sel = origins[edge].reshape(-1, 3)
    d_sel = dirs[edge].reshape(-1, 3)
    t, fidx = raycast_mesh(o_sel, d_sel, vertices, faces)
    hit = fidx >= 0
    shaded = _shade(shading, colors, vertices, faces, fidx, d_sel, hit)

    k = int(edge.sum())
    bg_sub = np.repeat(out.background[edge], ss * ss, axis=0)
    sub = np.where(hit[:, None], shaded, bg_sub).reshape(k, ss * ss, 3)
    cov = hit.reshape(k, ss * ss).mean(axis=1)
    t_hit = np.where(hit, t, 0.0).reshape(k, ss * ss)
    n_hit = hit.reshape(k, ss * ss).sum(axis=1)
    depth = np.where(n_hit > 0, t_hit.sum(axis=1) / np.maximum(n_hit, 1),
                     camera.far)

    rgb = out.rgb.copy()
    opacity = out.opacity.copy()
    dep = out.depth.copy()
    rgb[edge] = sub.mean(axis=1)
    opacity[edge] = cov
    dep[edge] = depth
    return RenderOutput(rgb=rgb, opacity=opacity, depth=dep,
                        background=out.background)


def silhouette_iou(mask_a, mask_b) -> float:
    a = np.asarray(mask_a) > 0.5
    b = np.asarray(mask_b) > 0.5
    union = (a | b).sum()
    if union == 0:
        return 1.0
    return float((a & b).sum() / union)
