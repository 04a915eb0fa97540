"""HTTP front end over the same handler as the stream server.

Routes expose evaluation and accounting only: no weights, gradients or
hidden activations are reachable from here.
"""

from __future__ import annotations

from fastapi import FastAPI, Request, Response

from ..protocol import payload_sizes
from .core import InferenceService
from .schemas import HealthResponse, ServiceInfo, SizesRequest, SizesResponse, StatsResponse

OCTET = "application/octet-stream"


def create_app(service: InferenceService) -> FastAPI:
    app = FastAPI(title="bbtune inference service")
    app.state.service = service

    @app.get("/v1/health", response_model=HealthResponse)
    def health():
        return HealthResponse()

    @app.get("/v1/info", response_model=ServiceInfo)
    def info():
        return ServiceInfo(**service.info())

    @app.get("/v1/stats", response_model=StatsResponse)
    def stats():
        return StatsResponse(requests_served=service.requests_served)

    @app.post("/v1/eval", response_class=Response)
    async def evaluate(request: Request):
        body = await request.body()
        return Response(content=service.handle_bytes(body), media_type=OCTET)

    @app.post("/v1/sizes", response_model=SizesResponse)
    def sizes(req: SizesRequest):
        s = payload_sizes(req.B, req.S, req.K, req.plen)
        return SizesResponse(**s.__dict__)

    return app
