"""HTTP server exposing pixel-space score-distillation gradients.

Endpoints:
  POST /sds_grad  — binary request/response (see wire.py). Errors:
                    400 malformed request (names the offending field),
                    503 no model loaded, 429 backlog full, 500 internal
                    (opaque incident id, no traceback leakage).
  GET  /health    — 200 {"status": "ok", "model_id": ...} when ready,
                    503 otherwise.
"""

from __future__ import annotations

import argparse
import logging
import threading
import time
import uuid

from fastapi import FastAPI, Request, Response
from fastapi.responses import JSONResponse

from .model import ToyLatentDiffusion, load_pretrained
from .wire import WireError, encode_sds_response, parse_sds_request

logger = logging.getLogger("sds_service")

MAX_PENDING = 8


def create_app(model=None, max_pending: int = MAX_PENDING) -> FastAPI:
    """Build the application. ``model=None`` serves 503s until a model is
    attached at ``app.state.model``."""
    app = FastAPI(title="sds-service")
    app.state.model = model
    app.state.backlog = threading.Semaphore(max_pending)

    @app.get("/health")
    def health():
        m = app.state.model
        if m is None:
            return JSONResponse({"status": "unavailable"}, status_code=503)
        return {"status": "ok", "model_id": m.model_id}

    @app.post("/sds_grad")
    async def sds_grad(request: Request):
        m = app.state.model
        if m is None:
            return JSONResponse({"error": "no model loaded"}, status_code=503)
        if not app.state.backlog.acquire(blocking=False):
            return JSONResponse({"error": "server busy"}, status_code=429)
        try:
            blob = await request.body()
            try:
                req = parse_sds_request(blob)
            except WireError as exc:
                return JSONResponse(
                    {"error": str(exc), "field": exc.field}, status_code=400)
            t0 = time.perf_counter()
            try:
                grad, step_m, s_m = m.pixel_gradient(
                    req["image"], req["prompt"], req["guidance_scale"],
                    req["timestep_range"], req["seed"], req["weighting"])
            except Exception:
                incident = uuid.uuid4().hex[:12]
                logger.exception("gradient computation failed (incident %s)",
                                 incident)
                return JSONResponse(
                    {"error": "internal error", "incident": incident},
                    status_code=500)
            latency_ms = (time.perf_counter() - t0) * 1000.0
            body = encode_sds_response(grad, step_m, s_m, m.model_id,
                                       latency_ms)
            return Response(content=body,
                            media_type="application/octet-stream")
        finally:
            app.state.backlog.release()

    return app


def main(argv=None):
    parser = argparse.ArgumentParser(
        description="serve score-distillation pixel gradients over HTTP")
    parser.add_argument("--host", default="127.0.0.1")
    parser.add_argument("--port", type=int, default=8000)
    parser.add_argument("--backend", choices=["toy", "pretrained"],
                        default="toy")
    parser.add_argument("--model-path",
                        help="checkpoint path for --backend pretrained")
    parser.add_argument("--max-pending", type=int, default=MAX_PENDING)
    args = parser.parse_args(argv)

    logging.basicConfig(level=logging.INFO)
    if args.backend == "toy":
        model = ToyLatentDiffusion()
    else:
        if not args.model_path:
            parser.error("--backend pretrained requires --model-path")
        model = load_pretrained(args.model_path)

    import uvicorn
    uvicorn.run(create_app(model, args.max_pending),
                host=args.host, port=args.port)


if __name__ == "__main__":
    main()
