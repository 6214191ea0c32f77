"""Pydantic models for the host's configuration and its JSON endpoints.

The key-store protocol itself is binary (``application/octet-stream``); only
status, error and harness bodies are JSON.
"""

from __future__ import annotations

from pathlib import Path
from typing import Optional

from pydantic import BaseModel, Field, field_validator


class HostConfig(BaseModel):
    listen_address: str = "127.0.0.1:8700"
    data_dir: Path = Path("./cks-data")
    host_rate_limit: float = Field(50.0, gt=0, description="requests/second per source address")
    harness_mode: bool = False
    time_offset: Optional[int] = None
    checkpoint_interval: float = Field(60.0, gt=0)
    kdf_log2_n: int = Field(14, ge=4, le=20)

    @field_validator("listen_address")
    @classmethod
    def _host_port(cls, v: str) -> str:
        host, sep, port = v.rpartition(":")
        if not sep or not host or not port.isdigit() or not 0 < int(port) < 65536:
            raise ValueError("listen address must be host:port")
        return v

    @property
    def host(self) -> str:
        return self.listen_address.rpartition(":")[0]

    @property
    def port(self) -> int:
        return int(self.listen_address.rpartition(":")[2])


class ErrorBody(BaseModel):
    code: str
    message: str = ""


class StatusResponse(BaseModel):
    state: str
    measurement: str
    failure: Optional[str] = None
    harness_mode: bool = False


class ClockAdvance(BaseModel):
    seconds: int = Field(..., ge=0)


class FaultRequest(BaseModel):
    point: str = "after_audit"
    count: int = Field(1, ge=0)


class MetricsResponse(BaseModel):
    state: str
    password_comparisons: int
    users: int
    keys: int
    audit_entries: int
    version: int
    blob_writes: int
    throttled: int
    trusted_ticks: int
