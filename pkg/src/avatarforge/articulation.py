"""Training-free articulation of the implicit field: observation-space
sample points are mapped to canonical space by blending the inverse vertex
transforms of the nearest target-mesh triangle (barycentric weights), and
samples far from the target surface are masked out of the compositing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .body import (BodyConfiguration, DegenerateTransformError,
                   RiggedBodyModel, vertex_transforms)
from .bvh import MeshBvh
from .renderer import Camera, RenderOutput, render_image


@dataclass
class SurfaceCorrespondence:
    point: np.ndarray
    triangle: int
    barycentric: np.ndarray
    distance: float


class ArticulatedField:
    """A field + rig + target configuration, ready to warp and render."""

    def __init__(self, model: RiggedBodyModel, target: BodyConfiguration,
                 delta: float = None, smooth_mask: bool = False):
        self.model = model
        self.target = target
        self.transforms = vertex_transforms(model, target)
        self.deformed = self.transforms.apply(model.template_vertices)
        self.bvh = MeshBvh(self.deformed, model.faces)
        if delta is None:
            delta = 0.05 * model.canonical_height
        self.delta = float(delta)
        self.smooth_mask = smooth_mask

    # -- correspondence and warping -----------------------------------------

    def nearest_surface(self, points):
        """Exact nearest point on the deformed mesh for each query."""
        dist, tri, closest, bary = self.bvh.nearest(points)
        return dist, tri, closest, bary

    def warp_to_canonical(self, points):
        """Map observation-space points (Q, 3) to canonical space.

        The three per-vertex inverse transforms of the nearest triangle are
        blended barycentrically (linear part entrywise, translation
        linearly) and applied. Returns (canonical points, distances,
        triangle indices, barycentrics).
        """
        points = np.atleast_2d(np.asarray(points, np.float64))
        dist, tri, _, bary = self.nearest_surface(points)
        inv = self.transforms.inverses[self.model.faces[tri]]  # (Q, 3, 4, 4)
        blended = np.einsum("qv,qvab->qab", bary, inv)
        dets = np.linalg.det(blended[:, :3, :3])
        bad = np.flatnonzero(np.abs(dets) < 1e-8)
        if bad.size:
            raise DegenerateTransformError(
                f"singular blended inverse transform at query {int(bad[0])}")
        canonical = (np.einsum("qab,qb->qa", blended[:, :3, :3], points)
                     + blended[:, :3, 3])
        return canonical, dist, tri, bary

    def density_mask(self, distances):
        """1 inside the delta band (inclusive), 0 far away; optional linear
        ramp over [delta, 1.2 delta] when smooth masking is enabled."""
        distances = np.asarray(distances, np.float64)
        if self.delta <= 0:
            raise ValueError("delta must be positive")
        if self.smooth_mask:
            return np.clip((1.2 * self.delta - distances) / (0.2 * self.delta),
                           0.0, 1.0) * (distances <= 1.2 * self.delta)
        return (distances <= self.delta).astype(np.float64)

    # -- rendering ------------------------------------------------------------

    def _warp_callback(self, dtype):
        def warp(flat: torch.Tensor):
            pts = flat.detach().cpu().double().numpy()
            canonical, dist, _, _ = self.warp_to_canonical(pts)
            mask = self.density_mask(dist)
            return (torch.as_tensor(canonical, dtype=dtype),
                    torch.as_tensor(mask, dtype=dtype))
        return warp

    def render(self, field, camera: Camera, **render_kwargs) -> RenderOutput:
        """Render the articulated avatar; the compositing alphas of masked
        samples are zeroed, preserving transmittance for later samples."""
        dtype = next(field.parameters()).dtype
        if "clip_aabb" not in render_kwargs:
            pad = 1.5 * self.delta
            render_kwargs["clip_aabb"] = (self.deformed.min(axis=0) - pad,
                                          self.deformed.max(axis=0) + pad)
        return render_image(field, camera, warp=self._warp_callback(dtype),
                            **render_kwargs)


def render_articulated(field, camera: Camera, target: BodyConfiguration,
                       model: RiggedBodyModel, delta=None,
                       smooth_mask=False, **render_kwargs) -> RenderOutput:
    art = ArticulatedField(model, target, delta=delta, smooth_mask=smooth_mask)
    return art.render(field, camera, **render_kwargs)
