"""Multiresolution hash-grid positional encoding.

Each level is a voxel grid over the domain box. Levels whose full corner
lattice fits in the table use dense (collision-free) indexing; finer levels
hash corner coordinates with per-axis prime multipliers XOR-folded modulo
the table size. Features at the 8 surrounding corners are trilinearly
interpolated and the per-level results concatenated.
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn

PRIMES = (1, 2654435761, 805459861)


class DomainError(ValueError):
    """Query point outside the encoding's domain box."""


class HashGridEncoding(nn.Module):
    def __init__(self, num_levels=16, base_resolution=16, per_level_scale=1.38,
                 table_size=2 ** 19, feature_dim=2,
                 aabb_min=(-1.0, -1.0, -1.0), aabb_max=(1.0, 1.0, 1.0),
                 init_std=1e-4, generator=None, dtype=torch.float32):
        super().__init__()
        if table_size & (table_size - 1):
            raise ValueError("table_size must be a power of two")
        self.num_levels = num_levels
        self.base_resolution = base_resolution
        self.per_level_scale = float(per_level_scale)
        self.table_size = table_size
        self.feature_dim = feature_dim
        self.register_buffer("aabb_min", torch.tensor(aabb_min, dtype=dtype))
        self.register_buffer("aabb_max", torch.tensor(aabb_max, dtype=dtype))

        resolutions = []
        dense = []
        sizes = []
        for lv in range(num_levels):
            res = int(math.floor(base_resolution * self.per_level_scale ** lv))
            res = max(res, 1)
            corners = (res + 1) ** 3
            resolutions.append(res)
            dense.append(corners <= table_size)
            sizes.append(corners if corners <= table_size else table_size)
        self.resolutions = resolutions
        self.dense_level = dense
        self.level_sizes = sizes
        offsets = [0]
        for s in sizes:
            offsets.append(offsets[-1] + s)
        self.level_offsets = offsets

        table = torch.empty(offsets[-1], feature_dim, dtype=dtype)
        table.uniform_(-init_std, init_std, generator=generator)
        self.feature_table = nn.Parameter(table)

        # precomputed constants for the vectorized lookup
        self.register_buffer("_res", torch.tensor(resolutions, dtype=torch.long))
        self.register_buffer("_dense", torch.tensor(dense, dtype=torch.bool))
        self.register_buffer("_offs", torch.tensor(offsets[:-1], dtype=torch.long))
        bits = torch.tensor([[(c >> a) & 1 for a in range(3)]
                             for c in range(8)], dtype=torch.long)
        self.register_buffer("_bits", bits)
        self.register_buffer("_bits_bool", bits.bool())

    @property
    def output_dim(self) -> int:
        return self.num_levels * self.feature_dim

    def _normalize(self, x: torch.Tensor, check: bool = True) -> torch.Tensor:
        u = (x - self.aabb_min) / (self.aabb_max - self.aabb_min)
        if check:
            tol = 1e-6
            if (u.min() < -tol) or (u.max() > 1 + tol):
                bad = ((u < -tol) | (u > 1 + tol)).any(dim=-1)
                idx = int(bad.reshape(-1).nonzero()[0]) if bad.any() else -1
                raise DomainError(
                    f"query outside domain_aabb (first offending point index {idx})")
        return u.clamp(0.0, 1.0)

    def corner_indices(self, corners: torch.Tensor, level: int) -> torch.Tensor:
        """Table row for integer corner coordinates (..., 3) at ``level``."""
        res = self.resolutions[level]
        if self.dense_level[level]:
            idx = (corners[..., 0]
                   + corners[..., 1] * (res + 1)
                   + corners[..., 2] * (res + 1) ** 2)
        else:
            idx = (corners[..., 0] * PRIMES[0]
                   ^ corners[..., 1] * PRIMES[1]
                   ^ corners[..., 2] * PRIMES[2]) & (self.table_size - 1)
        return idx + self.level_offsets[level]

    def forward(self, x: torch.Tensor, check_domain: bool = True) -> torch.Tensor:
        """Encode points (..., 3) -> (..., num_levels * feature_dim)."""
        shape = x.shape[:-1]
        u = self._normalize(x.reshape(-1, 3), check=check_domain)
        res = self._res                                     # (L,)
        pos = u[:, None, :] * res[None, :, None].to(u.dtype)  # (N, L, 3)
        c0 = pos.detach().floor().long()
        c0 = torch.minimum(torch.clamp(c0, min=0), (res - 1)[None, :, None])
        frac = pos - c0.to(pos.dtype)

        corners = c0[:, :, None, :] + self._bits[None, None]  # (N, L, 8, 3)
        w = torch.where(self._bits_bool[None, None], frac[:, :, None, :],
                        1.0 - frac[:, :, None, :]).prod(dim=-1)  # (N, L, 8)

        with torch.no_grad():
            r1 = (res + 1)[None, :, None]
            dense_idx = (corners[..., 0] + corners[..., 1] * r1
                         + corners[..., 2] * r1 * r1)
            hash_idx = ((corners[..., 0] * PRIMES[0])
                        ^ (corners[..., 1] * PRIMES[1])
                        ^ (corners[..., 2] * PRIMES[2])) & (self.table_size - 1)
            rows = torch.where(self._dense[None, :, None], dense_idx, hash_idx) \
                + self._offs[None, :, None]
        feats = (w[..., None] * self.feature_table[rows]).sum(dim=2)  # (N, L, F)
        return feats.reshape(*shape, self.output_dim)

    def hyperparams(self) -> dict:
        return {
            "num_levels": self.num_levels,
            "base_resolution": self.base_resolution,
            "per_level_scale": self.per_level_scale,
            "table_size": self.table_size,
            "feature_dim": self.feature_dim,
            "aabb_min": self.aabb_min.tolist(),
            "aabb_max": self.aabb_max.tolist(),
        }
