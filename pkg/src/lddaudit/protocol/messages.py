"""In-process protocol messages. See :mod:`.wire` for the byte encoding."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

from ..commitment import Commitment
from .vc import VcReport


@dataclass(frozen=True)
class Request:
    request_id: str
    prompt: tuple[int, ...]


@dataclass(frozen=True)
class Response:
    request_id: str
    y: tuple[int, ...]
    T: int
    trace_commitment: Commitment


@dataclass(frozen=True)
class Audit:
    request_id: str


@dataclass(frozen=True)
class Proof:
    """VC output plus the public inputs it was run on."""

    request_id: str
    vc_ok: bool
    report: VcReport
    prompt: tuple[int, ...]
    y: tuple[int, ...]
    T: int
    trace_commitment: Commitment

    @property
    def ldd_report(self) -> VcReport:
        return self.report


Message = Union[Request, Response, Audit, Proof]
