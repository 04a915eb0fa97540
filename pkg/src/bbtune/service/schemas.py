from pydantic import BaseModel, Field


class HealthResponse(BaseModel):
    status: str = "ok"


class ServiceInfo(BaseModel):
    num_classes: int
    vocab_size: int
    embed_dim: int
    full_dim: int | None = Field(None, description="prompt length in floats when a projection is configured")
    sub_dim: int | None = Field(None, description="accepts subspace vectors of this length when set")
    max_batch: int


class StatsResponse(BaseModel):
    requests_served: int


class SizesRequest(BaseModel):
    B: int = Field(..., gt=0)
    S: int = Field(..., gt=0)
    K: int = Field(..., gt=0)
    plen: int = Field(..., gt=0)


class SizesResponse(BaseModel):
    upload_ids: int
    upload_mask: int
    upload_prompt: int
    download: int
    upload_mask_pos: int
    request_header: int
    response_header: int
