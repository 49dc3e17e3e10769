"""Implicit avatar field: hash-grid encoding feeding a small SDF network
(depth 2) and a color network (depth 3), with a logistic-density sharpness
scalar used by the renderer.

Sign convention: f < 0 inside, f > 0 outside. The geometry output is biased
by an analytic sphere of radius 0.5 centered in the domain box so that a
freshly initialized field already carries a well-conditioned zero level set.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn as nn

from .container import read_container, write_container
from .hashgrid import HashGridEncoding

CHECKPOINT_META_KEY = "avatar_field"


class NumericError(RuntimeError):
    """Non-finite value produced during field evaluation."""


def frequency_embed(d: torch.Tensor, num_bands: int) -> torch.Tensor:
    """Frequency embedding of directions: [d, sin(2^k d), cos(2^k d)]."""
    out = [d]
    for k in range(num_bands):
        out.append(torch.sin(d * (2.0 ** k)))
        out.append(torch.cos(d * (2.0 ** k)))
    return torch.cat(out, dim=-1)


class ImplicitAvatarField(nn.Module):
    def __init__(self, num_levels=16, base_resolution=16, per_level_scale=1.38,
                 table_size=2 ** 19, feature_dim=2, hidden_dim=64,
                 geo_feat_dim=15, dir_bands=4, direction_independent=False,
                 sharpness_init=30.0, sphere_init_radius=0.5,
                 aabb_min=(-1.0, -1.0, -1.0), aabb_max=(1.0, 1.0, 1.0),
                 seed=0, dtype=torch.float32):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        self.encoding = HashGridEncoding(
            num_levels=num_levels, base_resolution=base_resolution,
            per_level_scale=per_level_scale, table_size=table_size,
            feature_dim=feature_dim, aabb_min=aabb_min, aabb_max=aabb_max,
            generator=gen, dtype=dtype)
        self.geo_feat_dim = geo_feat_dim
        self.dir_bands = dir_bands
        self.direction_independent = direction_independent
        self.sphere_init_radius = sphere_init_radius
        self.hidden_dim = hidden_dim
        self._hparams = {
            "num_levels": num_levels, "base_resolution": base_resolution,
            "per_level_scale": per_level_scale, "table_size": table_size,
            "feature_dim": feature_dim, "hidden_dim": hidden_dim,
            "geo_feat_dim": geo_feat_dim, "dir_bands": dir_bands,
            "direction_independent": direction_independent,
            "sharpness_init": sharpness_init,
            "sphere_init_radius": sphere_init_radius,
            "aabb_min": list(aabb_min), "aabb_max": list(aabb_max),
        }

        enc_dim = self.encoding.output_dim
        self.sdf_net = nn.Sequential(
            nn.Linear(enc_dim, hidden_dim), nn.Softplus(beta=100.0),
            nn.Linear(hidden_dim, 1 + geo_feat_dim))
        dir_dim = 0 if direction_independent else 3 * (1 + 2 * dir_bands)
        self.color_net = nn.Sequential(
            nn.Linear(geo_feat_dim + dir_dim, hidden_dim), nn.ReLU(),
            nn.Linear(hidden_dim, hidden_dim), nn.ReLU(),
            nn.Linear(hidden_dim, 3))
        self.log_s = nn.Parameter(torch.tensor(math.log(sharpness_init),
                                               dtype=dtype))
        self._init_weights(gen)
        if dtype != torch.float32:
            self.to(dtype)

    def _init_weights(self, gen):
        for m in list(self.sdf_net) + list(self.color_net):
            if isinstance(m, nn.Linear):
                bound = 1.0 / math.sqrt(m.in_features)
                with torch.no_grad():
                    m.weight.uniform_(-bound, bound, generator=gen)
                    m.bias.zero_()
        # keep the raw SDF output near zero at init so the sphere bias rules
        with torch.no_grad():
            last = self.sdf_net[-1]
            last.weight[0].mul_(1e-2)

    # -- parameter groups ---------------------------------------------------

    def geometry_parameters(self):
        """Θ_f: encoding table + SDF network."""
        return list(self.encoding.parameters()) + list(self.sdf_net.parameters())

    def color_parameters(self):
        """Θ_c: color network."""
        return list(self.color_net.parameters())

    # -- evaluation ---------------------------------------------------------

    @property
    def sharpness_s(self) -> torch.Tensor:
        return self.log_s.exp()

    @property
    def domain_aabb(self):
        return self.encoding.aabb_min, self.encoding.aabb_max

    def _sphere_bias(self, x: torch.Tensor) -> torch.Tensor:
        lo, hi = self.domain_aabb
        center = (lo + hi) / 2
        return (x - center).norm(dim=-1) - self.sphere_init_radius

    def sdf_and_feature(self, x: torch.Tensor, check_domain=True):
        enc = self.encoding(x, check_domain=check_domain)
        out = self.sdf_net(enc)
        f = out[..., 0] + self._sphere_bias(x)
        return f, out[..., 1:]

    def sdf(self, x: torch.Tensor, with_gradient: bool = False,
            check_domain: bool = True):
        """Signed distance at x (..., 3); optionally its spatial gradient
        via reverse-mode differentiation."""
        if not with_gradient:
            f, _ = self.sdf_and_feature(x, check_domain=check_domain)
            self._check_finite(f, "sdf")
            return f
        x = x.detach().requires_grad_(True)
        f, _ = self.sdf_and_feature(x, check_domain=check_domain)
        grad = torch.autograd.grad(
            f, x, grad_outputs=torch.ones_like(f), create_graph=True)[0]
        self._check_finite(f, "sdf")
        self._check_finite(grad, "sdf gradient")
        return f, grad

    def color(self, geo_feat: torch.Tensor, d: torch.Tensor) -> torch.Tensor:
        if not self.direction_independent:
            norms = d.norm(dim=-1)
            if not torch.allclose(norms, torch.ones_like(norms), atol=1e-6):
                raise ValueError("directions must be unit length")
            inp = torch.cat([geo_feat, frequency_embed(d, self.dir_bands)], -1)
        else:
            inp = geo_feat
        return torch.sigmoid(self.color_net(inp))

    def evaluate(self, x: torch.Tensor, d: torch.Tensor, check_domain=True):
        """(sdf value, rgb) at points x viewed along unit directions d."""
        f, feat = self.sdf_and_feature(x, check_domain=check_domain)
        rgb = self.color(feat, d)
        self._check_finite(f, "sdf")
        self._check_finite(rgb, "color")
        return f, rgb

    @staticmethod
    def _check_finite(t: torch.Tensor, what: str):
        if not torch.isfinite(t).all():
            raise NumericError(f"non-finite values in {what}")

    # -- checkpoints ----------------------------------------------------------

    def save(self, path) -> None:
        blocks = {name: p.detach().cpu().numpy()
                  for name, p in self.state_dict().items()}
        write_container(path, blocks,
                        meta={"kind": CHECKPOINT_META_KEY,
                              "hyperparams": self._hparams})

    @classmethod
    def load(cls, path, dtype=torch.float32) -> "ImplicitAvatarField":
        blocks, meta = read_container(path)
        if meta.get("kind") != CHECKPOINT_META_KEY:
            raise ValueError(f"{path} is not an avatar field checkpoint")
        hp = dict(meta["hyperparams"])
        field = cls(dtype=dtype, **hp)
        state = {k: torch.from_numpy(np.asarray(v)).to(dtype)
                 for k, v in blocks.items()}
        field.load_state_dict(state)
        return field
