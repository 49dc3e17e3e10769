import numpy as np
import pytest

from sds_service.wire import (WIRE_VERSION, WireError, decode_message,
                              encode_message, encode_sds_response,
                              parse_sds_request)


def make_request(h=64, w=64, **overrides):
    header = {"v": WIRE_VERSION, "dims": [h, w, 3], "prompt": "a robot",
              "guidance_scale": 100.0, "timestep_range": [20, 980],
              "seed": 7, "weighting": {"mode": "constant", "scale": 1.0}}
    header.update(overrides)
    rng = np.random.default_rng(0)
    image = rng.random((h, w, 3), dtype=np.float32)
    return encode_message(header, image), image


def test_round_trip_preserves_header_and_payload():
    blob, image = make_request()
    header, payload = decode_message(blob)
    assert header["v"] == WIRE_VERSION          # [TRIVIAL]
    assert header["prompt"] == "a robot"        # [TRIVIAL]
    np.testing.assert_array_equal(payload.reshape(64, 64, 3), image)


def test_parse_request_returns_typed_fields():
    blob, image = make_request()
    req = parse_sds_request(blob)
    assert req["image"].shape == (64, 64, 3)
    assert req["image"].dtype == np.float32
    assert req["timestep_range"] == (20, 980)
    assert req["guidance_scale"] == 100.0
    np.testing.assert_array_equal(req["image"], image)


@pytest.mark.parametrize("overrides, field", [
    ({"v": 2}, "v"),
    ({"dims": [64, 64]}, "dims"),
    ({"dims": [64, 64, 4]}, "dims"),
    ({"dims": [0, 64, 3]}, "dims"),
    ({"guidance_scale": -1.0}, "guidance_scale"),
    ({"timestep_range": [0, 980]}, "timestep_range"),
    ({"timestep_range": [900, 20]}, "timestep_range"),
    ({"weighting": {"mode": "quadratic"}}, "weighting"),
    ({"seed": "zero"}, "seed"),
])
def test_invalid_fields_raise_named_wire_errors(overrides, field):
    blob, _ = make_request(**overrides)
    with pytest.raises(WireError) as exc:
        parse_sds_request(blob)
    assert exc.value.field == field


def test_payload_size_mismatch_is_rejected():
    blob, _ = make_request(dims=[128, 128, 3])  # payload stays 64x64
    with pytest.raises(WireError) as exc:
        parse_sds_request(blob)
    assert exc.value.field == "payload"


def test_truncated_message_is_rejected():
    blob, _ = make_request()
    with pytest.raises(WireError):
        decode_message(blob[:2])
    with pytest.raises(WireError):
        decode_message(blob[:10])


def test_response_encoding_round_trips():
    grad = np.random.default_rng(1).normal(size=(64, 64, 3)).astype(np.float32)
    blob = encode_sds_response(grad, m=417, s_m=2.5, model_id="toy",
                               latency_ms=12.0)
    header, payload = decode_message(blob)
    assert header["m"] == 417
    assert header["s_m"] == 2.5
    assert header["model_id"] == "toy"
    np.testing.assert_array_equal(payload.reshape(grad.shape), grad)
