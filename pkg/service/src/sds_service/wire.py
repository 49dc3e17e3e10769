"""Wire format, version 1 (shared contract with clients).

A message is: 4-byte little-endian uint32 header length, UTF-8 JSON header,
raw little-endian float32 payload. Request headers carry ``v``, ``dims``,
``prompt``, ``guidance_scale``, ``timestep_range``, ``seed``, ``weighting``;
responses echo ``v`` and ``dims`` and add ``m``, ``s_m``, ``model_id``,
``latency_ms``.
"""

from __future__ import annotations

import json
import struct

import numpy as np

WIRE_VERSION = 1


class WireError(ValueError):
    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


def encode_message(header: dict, payload: np.ndarray) -> bytes:
    raw = json.dumps(header).encode("utf-8")
    body = np.ascontiguousarray(np.asarray(payload).astype("<f4")).tobytes()
    return struct.pack("<I", len(raw)) + raw + body


def decode_message(blob: bytes):
    if len(blob) < 4:
        raise WireError("header", "message shorter than the length prefix")
    (hlen,) = struct.unpack("<I", blob[:4])
    if len(blob) < 4 + hlen:
        raise WireError("header", "truncated header")
    try:
        header = json.loads(blob[4:4 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise WireError("header", f"not valid JSON ({exc})") from exc
    payload = np.frombuffer(blob[4 + hlen:], dtype="<f4")
    return header, payload


def parse_sds_request(blob: bytes):
    """Validate and unpack an /sds_grad request body."""
    header, payload = decode_message(blob)
    if header.get("v") != WIRE_VERSION:
        raise WireError("v", f"unsupported wire version {header.get('v')}")
    dims = header.get("dims")
    if (not isinstance(dims, list) or len(dims) != 3 or dims[2] != 3
            or any(not isinstance(d, int) or d <= 0 for d in dims)):
        raise WireError("dims", "expected [H, W, 3] with positive dimensions")
    if payload.size != dims[0] * dims[1] * dims[2]:
        raise WireError("payload",
                        f"expected {dims[0] * dims[1] * dims[2]} floats, "
                        f"got {payload.size}")
    scale = header.get("guidance_scale", 100.0)
    if not isinstance(scale, (int, float)) or scale <= 0:
        raise WireError("guidance_scale", "must be a positive number")
    t_range = header.get("timestep_range", [20, 980])
    if (not isinstance(t_range, list) or len(t_range) != 2
            or not all(isinstance(t, int) for t in t_range)
            or not (0 < t_range[0] <= t_range[1])):
        raise WireError("timestep_range", "expected [lo, hi] with 0 < lo <= hi")
    weighting = header.get("weighting", {"mode": "constant", "scale": 1.0})
    if (not isinstance(weighting, dict)
            or weighting.get("mode") not in ("constant", "alpha")):
        raise WireError("weighting", "mode must be 'constant' or 'alpha'")
    seed = header.get("seed", 0)
    if not isinstance(seed, int):
        raise WireError("seed", "must be an integer")
    return {
        "image": payload.reshape(dims).astype(np.float32),
        "prompt": str(header.get("prompt", "")),
        "guidance_scale": float(scale),
        "timestep_range": (t_range[0], t_range[1]),
        "seed": seed,
        "weighting": weighting,
    }


def encode_sds_response(gradient: np.ndarray, m: int, s_m: float,
                        model_id: str, latency_ms: float) -> bytes:
    header = {"v": WIRE_VERSION, "dims": list(gradient.shape), "m": int(m),
              "s_m": float(s_m), "model_id": model_id,
              "latency_ms": float(latency_ms)}
    return encode_message(header, gradient)
