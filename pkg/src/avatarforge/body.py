"""Parametric skinned body: shape blend-shapes, linear blend skinning over a
joint tree, and per-vertex invertible transforms between the canonical
template and any target pose/shape.

All math is float64 numpy; operations are pure functions of their inputs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .container import read_container, write_container

RIG_META_KEY = "rigged_body"


class DegenerateTransformError(RuntimeError):
    pass


def rodrigues(axis_angle: np.ndarray) -> np.ndarray:
    """Rotation matrices (..., 3, 3) from axis-angle vectors (..., 3)."""
    aa = np.asarray(axis_angle, dtype=np.float64)
    theta = np.linalg.norm(aa, axis=-1, keepdims=True)
    small = theta < 1e-12
    axis = np.where(small, 0.0, aa / np.where(small, 1.0, theta))
    x, y, z = axis[..., 0], axis[..., 1], axis[..., 2]
    zero = np.zeros_like(x)
    K = np.stack([
        np.stack([zero, -z, y], -1),
        np.stack([z, zero, -x], -1),
        np.stack([-y, x, zero], -1)], -2)
    th = theta[..., None]
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + np.sin(th) * K + (1 - np.cos(th)) * (K @ K)


@dataclass
class RiggedBodyModel:
    template_vertices: np.ndarray   # (N, 3)
    faces: np.ndarray               # (M, 3) int
    joints: np.ndarray              # (J, 3) rest positions
    parents: np.ndarray             # (J,) int, -1 for root
    skinning_weights: np.ndarray    # (N, J)
    shape_dirs: np.ndarray          # (N, 3, K)
    name: str = "rig"

    def __post_init__(self):
        self.template_vertices = np.asarray(self.template_vertices, np.float64)
        self.faces = np.asarray(self.faces, np.int32)
        self.joints = np.asarray(self.joints, np.float64)
        self.parents = np.asarray(self.parents, np.int32)
        self.skinning_weights = np.asarray(self.skinning_weights, np.float64)
        self.shape_dirs = np.asarray(self.shape_dirs, np.float64)
        self.validate()

    def validate(self):
        n = len(self.template_vertices)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= n):
            raise ValueError("face indices out of range")
        w = self.skinning_weights
        if (w < -1e-9).any():
            raise ValueError("skinning weights must be nonnegative")
        if np.abs(w.sum(axis=1) - 1).max() > 1e-6:
            raise ValueError("skinning weight rows must sum to 1")
        # parents must form a single rooted tree
        roots = np.flatnonzero(self.parents < 0)
        if len(roots) != 1:
            raise ValueError("joint tree must have exactly one root")
        for j, p in enumerate(self.parents):
            seen = set()
            while p >= 0:
                if p in seen or p == j:
                    raise ValueError("joint parents contain a cycle")
                seen.add(int(p))
                p = self.parents[p]

    @property
    def num_joints(self) -> int:
        return len(self.joints)

    @property
    def num_shape_params(self) -> int:
        return self.shape_dirs.shape[2]

    @property
    def canonical_height(self) -> float:
        v = self.template_vertices
        return float(v[:, 2].max() - v[:, 2].min())

    def save(self, path):
        write_container(path, {
            "template_vertices": self.template_vertices,
            "faces": self.faces,
            "joints": self.joints,
            "parents": self.parents,
            "skinning_weights": self.skinning_weights,
            "shape_dirs": self.shape_dirs,
        }, meta={"kind": RIG_META_KEY, "name": self.name,
                 "counts": {"vertices": len(self.template_vertices),
                            "faces": len(self.faces),
                            "joints": self.num_joints,
                            "shape_params": self.num_shape_params},
                 # reserved for pose-dependent corrective blend shapes
                 "pose_dirs": None})

    @classmethod
    def load(cls, path) -> "RiggedBodyModel":
        blocks, meta = read_container(path)
        if meta.get("kind") != RIG_META_KEY:
            raise ValueError(f"{path} is not a rig file")
        return cls(template_vertices=blocks["template_vertices"],
                   faces=blocks["faces"], joints=blocks["joints"],
                   parents=blocks["parents"],
                   skinning_weights=blocks["skinning_weights"],
                   shape_dirs=blocks["shape_dirs"],
                   name=meta.get("name", "rig"))


@dataclass
class BodyConfiguration:
    pose: np.ndarray          # (J, 3) axis-angle
    shape: np.ndarray         # (K,)
    root_translation: np.ndarray = None

    def __post_init__(self):
        self.pose = np.asarray(self.pose, np.float64)
        self.shape = np.asarray(self.shape, np.float64)
        if self.root_translation is None:
            self.root_translation = np.zeros(3)
        self.root_translation = np.asarray(self.root_translation, np.float64)
        if not (np.isfinite(self.pose).all() and np.isfinite(self.shape).all()
                and np.isfinite(self.root_translation).all()):
            raise ValueError("pose/shape parameters must be finite")

    @classmethod
    def canonical(cls, model: RiggedBodyModel) -> "BodyConfiguration":
        return cls(pose=np.zeros((model.num_joints, 3)),
                   shape=np.zeros(model.num_shape_params))


@dataclass
class VertexTransformSet:
    transforms: np.ndarray       # (N, 4, 4) T = T_pose @ T_shape
    inverses: np.ndarray         # (N, 4, 4)
    shape_translations: np.ndarray  # (N, 3) the translation-only T^beta
    pose_transforms: np.ndarray  # (N, 4, 4) the skinning-blended T^theta

    def apply(self, points: np.ndarray) -> np.ndarray:
        return apply_affine(self.transforms, points)

    def apply_inverse(self, points: np.ndarray) -> np.ndarray:
        return apply_affine(self.inverses, points)


def apply_affine(mats: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Apply per-point 4x4 affines (N, 4, 4) to points (N, 3)."""
    return np.einsum("nij,nj->ni", mats[:, :3, :3], points) + mats[:, :3, 3]


def shape_blend(model: RiggedBodyModel, shape: np.ndarray):
    """Shaped vertices V_0 + sum_k beta_k S[:, :, k] and the per-vertex
    translation carrying each template vertex to its shaped position."""
    shape = np.asarray(shape, np.float64)
    if shape.shape != (model.num_shape_params,):
        raise ValueError(
            f"expected shape vector of length {model.num_shape_params}, "
            f"got {shape.shape}")
    disp = model.shape_dirs @ shape          # (N, 3)
    return model.template_vertices + disp, disp


def joint_transforms(model: RiggedBodyModel, pose: np.ndarray) -> np.ndarray:
    """Global 4x4 transform per joint, composed down the kinematic tree,
    relative to the rest configuration (rest pose maps joints to themselves)."""
    pose = np.asarray(pose, np.float64)
    if not np.isfinite(pose).all():
        raise ValueError("pose contains non-finite values")
    rots = rodrigues(pose)
    J = model.num_joints
    out = np.zeros((J, 4, 4))
    for j in range(J):
        local = np.eye(4)
        local[:3, :3] = rots[j]
        p = model.parents[j]
        if p < 0:
            local[:3, 3] = model.joints[j]
            out[j] = local
        else:
            local[:3, 3] = model.joints[j] - model.joints[p]
            out[j] = out[p] @ local
    return out


def lbs(model: RiggedBodyModel, pose: np.ndarray, shaped_vertices: np.ndarray):
    """Posed vertices and per-vertex blended transforms T^theta.

    T^theta_v = sum_j w_vj G_j(pose) G_j(rest)^(-1); the rest-relative form
    is realized by un-translating each joint's rest position.
    """
    G = joint_transforms(model, pose)
    # G_rest is pure translation to the joint; G @ G_rest^{-1} shifts by -joint
    rel = G.copy()
    rel[:, :3, 3] -= np.einsum("jab,jb->ja", G[:, :3, :3], model.joints)
    W = model.skinning_weights                       # (N, J)
    T = np.einsum("nj,jab->nab", W, rel)             # (N, 4, 4)
    posed = apply_affine(T, shaped_vertices)
    return posed, T


def vertex_transforms(model: RiggedBodyModel,
                      target: BodyConfiguration) -> VertexTransformSet:
    """Per-vertex T = T^theta T^beta with cached inverses. Applying T to the
    template reproduces the posed+shaped mesh; root translation is applied
    after skinning."""
    shaped, disp = shape_blend(model, target.shape)
    _, T_theta = lbs(model, target.pose, shaped)
    T_theta = T_theta.copy()
    T_theta[:, :3, 3] += target.root_translation

    T_beta = np.tile(np.eye(4), (len(disp), 1, 1))
    T_beta[:, :3, 3] = disp
    T = T_theta @ T_beta

    dets = np.linalg.det(T[:, :3, :3])
    bad = np.flatnonzero(np.abs(dets) < 1e-8)
    if bad.size:
        raise DegenerateTransformError(
            f"singular blended transform at vertex {int(bad[0])}")
    return VertexTransformSet(transforms=T, inverses=np.linalg.inv(T),
                              shape_translations=disp, pose_transforms=T_theta)


def deformed_vertices(model: RiggedBodyModel,
                      target: BodyConfiguration) -> np.ndarray:
    return vertex_transforms(model, target).apply(model.template_vertices)


# ---------------------------------------------------------------------------
# pose sequences
# ---------------------------------------------------------------------------

def save_pose_sequence(path, frames) -> None:
    """frames: iterable of BodyConfiguration (or (index, cfg))."""
    records = []
    for i, cfg in enumerate(frames):
        if isinstance(cfg, tuple):
            i, cfg = cfg
        records.append({
            "frame_index": int(i),
            "pose": cfg.pose.tolist(),
            "root_translation": cfg.root_translation.tolist(),
            "shape": cfg.shape.tolist(),
        })
    Path(path).write_text(json.dumps(records, indent=1))


def load_pose_sequence(path):
    records = json.loads(Path(path).read_text())
    frames = []
    for rec in sorted(records, key=lambda r: r["frame_index"]):
        frames.append(BodyConfiguration(
            pose=np.asarray(rec["pose"], np.float64),
            shape=np.asarray(rec["shape"], np.float64),
            root_translation=np.asarray(
                rec.get("root_translation", [0, 0, 0]), np.float64)))
    return frames
