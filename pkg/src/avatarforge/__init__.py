"""Neural SDF avatar toolkit: hash-grid implicit fields, NeuS-style volume
rendering, guided generation with silhouette/Eikonal regularization, and
training-free mesh-guided articulation."""

from .body import (BodyConfiguration, RiggedBodyModel, VertexTransformSet,
                   lbs, shape_blend, vertex_transforms)
from .bvh import MeshBvh
from .field import ImplicitAvatarField
from .guidance import (GuidanceContext, GuidanceGradient, MockGuidance,
                       RemoteGuidance, augment_prompt)
from .hashgrid import HashGridEncoding
from .renderer import (Camera, Ray, RenderOutput, composite_render,
                       neus_weights, render_image, render_pixel, sample_ray)
from .articulation import ArticulatedField, render_articulated
from .training import (LossWeights, TrainingSchedule, reconstruct_template,
                       run_generation)

__all__ = [
    "ArticulatedField", "BodyConfiguration", "Camera", "GuidanceContext",
    "GuidanceGradient", "HashGridEncoding", "ImplicitAvatarField",
    "LossWeights", "MeshBvh", "MockGuidance", "Ray", "RemoteGuidance",
    "RenderOutput", "RiggedBodyModel", "TrainingSchedule",
    "VertexTransformSet", "augment_prompt", "composite_render", "lbs",
    "neus_weights", "reconstruct_template", "render_articulated",
    "render_image", "render_pixel", "run_generation", "sample_ray",
    "shape_blend", "vertex_transforms",
]

__version__ = "0.1.0"
