"""Text rendering for audit rows (human table and ``--porcelain``)."""

from __future__ import annotations

import time
from typing import Iterable

from .api import AuditRow

HEADER = ("SEQ", "TIME (UTC)", "UID", "OP", "INPUT", "OUTPUT")
INCOMPLETE = "-"


def wall_clock(seconds: int) -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime(seconds))


def parse_wall_clock(text: str) -> int:
    """Accepts epoch seconds or ``YYYY-MM-DDTHH:MM:SSZ``."""
    text = text.strip()
    if text.lstrip("-").isdigit():
        return int(text)
    import calendar

    for fmt in ("%Y-%m-%dT%H:%M:%SZ", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%d"):
        try:
            return calendar.timegm(time.strptime(text, fmt))
        except ValueError:
            continue
    raise ValueError(f"unrecognised time {text!r}")


def _short(digest: bytes | None) -> str:
    return INCOMPLETE if digest is None else digest.hex()[:16]


def audit_table(rows: Iterable[AuditRow]) -> str:
    table = [HEADER] + [
        (str(r.seq), wall_clock(r.time), r.uid, r.op, _short(r.input_digest), _short(r.output_digest)) for r in rows
    ]
    widths = [max(len(row[i]) for row in table) for i in range(len(HEADER))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in table]
    return "\n".join(lines) + "\n"


def audit_porcelain(rows: Iterable[AuditRow]) -> str:
    out = []
    for r in rows:
        output = r.output_digest.hex() if r.output_digest is not None else INCOMPLETE
        out.append("\t".join((str(r.seq), str(r.time), r.key_id, r.uid, r.op, r.input_digest.hex(), output)))
    return "".join(line + "\n" for line in out)
