"""HTTP service exposing score-distillation gradients in pixel space."""

from .model import ToyLatentDiffusion, load_pretrained
from .server import create_app, main
from .wire import (WIRE_VERSION, WireError, decode_message, encode_message,
                   encode_sds_response, parse_sds_request)

__version__ = "0.1.0"
