"""Guidance oracles: view-dependent prompt augmentation, an analytic mock
oracle whose gradient is the exact gradient of a known photometric loss,
and an HTTP client for the remote score-distillation service.

The wire format (owned here, version 1): a request or response is a 4-byte
little-endian uint32 header length, a UTF-8 JSON header, then a raw
little-endian float32 payload. Request headers carry
``{"v", "dims", "prompt", "guidance_scale", "timestep_range", "seed",
"weighting"}``; response headers echo ``dims`` plus diagnostics
``{"m", "s_m", "model_id", "latency_ms"}``.
"""

from __future__ import annotations

import json
import math
import struct
import time
from dataclasses import dataclass, field as dc_field

import numpy as np

WIRE_VERSION = 1


class TransportError(RuntimeError):
    def __init__(self, endpoint, attempts, cause):
        super().__init__(
            f"guidance service unreachable at {endpoint} after "
            f"{attempts} attempts: {cause}")
        self.endpoint = endpoint
        self.attempts = attempts


class ProtocolError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# prompt augmentation
# ---------------------------------------------------------------------------

def view_label(azimuth: float) -> str:
    """front / back / side label for an azimuth in [0, 2pi)."""
    if not (0.0 <= azimuth < 2 * math.pi):
        raise ValueError("azimuth must lie in [0, 2*pi)")
    if 5 * math.pi / 6 <= azimuth <= 7 * math.pi / 6:
        return "front"
    if azimuth <= math.pi / 6 or azimuth >= 11 * math.pi / 6:
        return "back"
    return "side"


def augment_prompt(prompt: str, body_part: str, azimuth: float) -> str:
    """Compose '<View> view of the <body|face> of <prompt>'."""
    if body_part not in ("body", "face"):
        raise ValueError("body_part must be 'body' or 'face'")
    return f"{view_label(azimuth).capitalize()} view of the {body_part} of {prompt}"


# ---------------------------------------------------------------------------
# oracle contract
# ---------------------------------------------------------------------------

@dataclass
class GuidanceContext:
    prompt: str = ""
    view_azimuth: float = 0.0
    body_part: str = "body"
    guidance_scale: float = 100.0
    timestep_range: tuple = (20, 980)
    seed: int = 0
    weighting: dict = dc_field(default_factory=lambda: {"mode": "constant",
                                                        "scale": 1.0})
    # opaque, never serialized; mock oracles read the current camera and
    # background realization from here
    extras: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        if self.guidance_scale <= 0:
            raise ValueError("guidance_scale must be positive")
        lo, hi = self.timestep_range
        if not (0 < lo <= hi):
            raise ValueError("timestep range must satisfy 0 < lo <= hi")

    @property
    def full_prompt(self) -> str:
        return augment_prompt(self.prompt, self.body_part, self.view_azimuth)


@dataclass
class GuidanceGradient:
    grad: np.ndarray          # (H, W, 3) d(loss)/d(pixel)
    timestep: int = -1
    weight: float = 1.0
    diagnostics: dict = dc_field(default_factory=dict)

    def __post_init__(self):
        if not np.isfinite(self.grad).all():
            raise ValueError("guidance gradient contains non-finite values")


class MockGuidance:
    """Analytic stand-in: gradient of (lam/2) * ||rendered - target||^2.

    ``target_fn(context) -> (H, W, 3)`` supplies the target for the current
    view; a fixed target array also works.
    """

    name = "mock"

    def __init__(self, target_fn, lam: float = 1.0):
        self.target_fn = target_fn if callable(target_fn) else (lambda _ctx: target_fn)
        self.lam = float(lam)

    def gradient(self, rendered: np.ndarray,
                 context: GuidanceContext) -> GuidanceGradient:
        target = np.asarray(self.target_fn(context), dtype=np.float64)
        rendered = np.asarray(rendered, dtype=np.float64)
        if rendered.shape != target.shape:
            raise ValueError(
                f"shape mismatch: rendered {rendered.shape} vs target {target.shape}")
        return GuidanceGradient(grad=self.lam * (rendered - target),
                                weight=self.lam,
                                diagnostics={"oracle": "mock"})

    def loss(self, rendered, context) -> float:
        """The scalar loss whose gradient this oracle returns."""
        target = np.asarray(self.target_fn(context), dtype=np.float64)
        return float(self.lam / 2 * np.sum((np.asarray(rendered) - target) ** 2))


# ---------------------------------------------------------------------------
# wire codec
# ---------------------------------------------------------------------------

def encode_message(header: dict, payload: np.ndarray) -> bytes:
    raw = json.dumps(header).encode("utf-8")
    body = np.ascontiguousarray(payload.astype("<f4")).tobytes()
    return struct.pack("<I", len(raw)) + raw + body


def decode_message(blob: bytes):
    if len(blob) < 4:
        raise ProtocolError("message shorter than header length prefix")
    (hlen,) = struct.unpack("<I", blob[:4])
    if len(blob) < 4 + hlen:
        raise ProtocolError("truncated header")
    try:
        header = json.loads(blob[4:4 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(f"malformed header: {exc}") from exc
    payload = np.frombuffer(blob[4 + hlen:], dtype="<f4")
    return header, payload


def encode_sds_request(image: np.ndarray, context: GuidanceContext) -> bytes:
    header = {
        "v": WIRE_VERSION,
        "dims": list(image.shape),
        "prompt": context.full_prompt,
        "guidance_scale": context.guidance_scale,
        "timestep_range": list(context.timestep_range),
        "seed": context.seed,
        "weighting": context.weighting,
    }
    return encode_message(header, np.asarray(image))


def decode_sds_response(blob: bytes, expected_shape) -> GuidanceGradient:
    header, payload = decode_message(blob)
    if header.get("v") != WIRE_VERSION:
        raise ProtocolError(f"unsupported wire version {header.get('v')}")
    dims = header.get("dims")
    if dims != list(expected_shape):
        raise ProtocolError(f"gradient dims {dims} != image dims {list(expected_shape)}")
    if payload.size != int(np.prod(dims)):
        raise ProtocolError("payload size does not match dims")
    grad = payload.reshape(dims).astype(np.float64)
    return GuidanceGradient(grad=grad, timestep=header.get("m", -1),
                            weight=header.get("s_m", 1.0),
                            diagnostics={k: header[k] for k in
                                         ("model_id", "latency_ms")
                                         if k in header})


class RemoteGuidance:
    """Client for the score-distillation service (POST /sds_grad)."""

    name = "remote"

    def __init__(self, endpoint: str, retries: int = 3, backoff: float = 0.5,
                 timeout: float = 120.0, session=None):
        self.endpoint = endpoint.rstrip("/")
        self.retries = retries
        self.backoff = backoff
        self.timeout = timeout
        if session is None:
            import requests
            session = requests.Session()
        self.session = session

    def gradient(self, rendered: np.ndarray,
                 context: GuidanceContext) -> GuidanceGradient:
        blob = encode_sds_request(rendered, context)
        last_exc = None
        for attempt in range(self.retries):
            try:
                resp = self.session.post(
                    self.endpoint + "/sds_grad", data=blob,
                    headers={"Content-Type": "application/octet-stream"},
                    timeout=self.timeout)
            except Exception as exc:  # connection-level failure
                last_exc = exc
                if attempt < self.retries - 1:
                    time.sleep(self.backoff * 2 ** attempt)
                continue
            if resp.status_code != 200:
                raise ProtocolError(
                    f"service returned {resp.status_code}: {resp.text[:200]}")
            return decode_sds_response(resp.content, rendered.shape)
        raise TransportError(self.endpoint, self.retries, last_exc)
