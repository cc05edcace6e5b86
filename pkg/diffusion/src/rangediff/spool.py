"""File-spool worker: answers generation tickets dropped into ``jobs/`` with
RVIM scans in ``out/``, one job at a time, atomic rename on completion."""

from __future__ import annotations

import hashlib
import json
import time
from pathlib import Path

from .rvim import read_rvim, write_rvim
from .sampling import ddim_sample, finalize_scan


def _job_seed(job_id: str) -> int:
    return int.from_bytes(hashlib.sha256(job_id.encode()).digest()[:4], "little")


def process_ticket(ticket_path: Path, spool: Path, model, schedule, cfg, steps: int) -> bool:
    """Answer one ticket; on failure an ``.err`` file is written instead."""
    job_id = ticket_path.stem
    out_path = spool / "out" / f"{job_id}.rvim"
    err_path = spool / "out" / f"{job_id}.err"
    try:
        ticket = json.loads(ticket_path.read_text())
        condition = read_rvim(ticket["condition_path"])
        planes = ddim_sample(condition, model, schedule, cfg, steps=steps,
                             seed=_job_seed(job_id))
        tmp = out_path.with_suffix(".tmp")
        write_rvim(tmp, finalize_scan(planes))
        tmp.rename(out_path)
        return True
    except Exception as exc:
        err_path.write_text(f"{type(exc).__name__}: {exc}")
        return False


def serve_spool(
    spool_dir,
    model,
    schedule,
    cfg,
    steps: int = 50,
    poll_interval: float = 0.2,
    idle_timeout: float | None = None,
    max_jobs: int | None = None,
    log=None,
) -> int:
    """Watch the spool until idle_timeout (or forever); returns jobs handled."""
    spool = Path(spool_dir)
    (spool / "jobs").mkdir(parents=True, exist_ok=True)
    (spool / "out").mkdir(parents=True, exist_ok=True)
    seen: set[str] = set()
    handled = 0
    last_activity = time.monotonic()
    while True:
        tickets = sorted(p for p in (spool / "jobs").glob("*.json") if p.name not in seen)
        for ticket in tickets:
            seen.add(ticket.name)
            ok = process_ticket(ticket, spool, model, schedule, cfg, steps)
            handled += 1
            last_activity = time.monotonic()
            if log is not None:
                log(f"job {ticket.stem}: {'ok' if ok else 'error'}")
            if max_jobs is not None and handled >= max_jobs:
                return handled
        if not tickets:
            if idle_timeout is not None and time.monotonic() - last_activity > idle_timeout:
                return handled
            time.sleep(poll_interval)
