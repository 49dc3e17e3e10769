"""Target providers for the mock guidance oracle.

The textured provider ray-casts the rig with fixed per-face colors under the
step's camera, composited over the same background realization the training
render used, so the mock gradient is the exact gradient of a photometric
loss that converges to a known appearance.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from .meshrender import render_mesh


def _upsample(image, size):
    if image.shape[0] == size:
        return np.asarray(image, np.float64)
    t = torch.as_tensor(np.asarray(image, np.float32)).permute(2, 0, 1)[None]
    up = F.interpolate(t, size=(size, size), mode="bilinear",
                       align_corners=False)
    return up[0].permute(1, 2, 0).double().numpy()


def _ctx_background(ctx):
    size = ctx.extras["oracle_size"]
    return _upsample(ctx.extras["background"], size)


def textured_rig_targets(model, face_colors, supersample=4):
    """Target = rig rendered with per-face colors over the step background.

    Targets are edge-antialiased by default so the photometric optimum is
    band-limited and reachable by a volume render.
    """
    face_colors = np.asarray(face_colors, np.float64)

    def fn(ctx):
        cam = ctx.extras["camera"]
        out = render_mesh(model.template_vertices, model.faces, cam,
                          shading="colors", colors=face_colors,
                          background=_ctx_background(ctx).astype(np.float32),
                          stride=1, supersample=supersample)
        return out.rgb.astype(np.float64)
    return fn


def erasing_targets():
    """Adversarial target: pure background, i.e. the body removed."""
    def fn(ctx):
        return _ctx_background(ctx)
    return fn
