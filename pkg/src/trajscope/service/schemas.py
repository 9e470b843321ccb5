"""Request/response bodies for the pipeline service."""

from __future__ import annotations

from typing import Optional

from pydantic import BaseModel, Field


class StageRequest(BaseModel):
    """Run one pipeline stage.

    config_path is resolved on the service host; overrides are
    section.key=value pairs applied on top of the file (or defaults).
    """

    config_path: Optional[str] = None
    overrides: list[str] = Field(default_factory=list)


class StageResponse(BaseModel):
    command: str
    out_dir: str
    outputs: list[str]
    manifest_path: str
    summary: dict


class HealthResponse(BaseModel):
    status: str
    version: str


class ErrorBody(BaseModel):
    error: str
    violations: list[str] = Field(default_factory=list)
