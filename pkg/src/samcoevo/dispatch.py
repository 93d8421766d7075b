"""Batch evaluation of (SAM genome, controller genome) pairs.

Jobs run on a local process pool, on remote workers, or both.  Remote
workers speak newline-delimited JSON over TCP; each request line is::

    {"job_id": 7, "canvas": [8, 4, 4], "sam": "<genome>", "con": "<genome>",
     "physics_digest": "<sha256>"}

and each response line is::

    {"job_id": 7, "status": "ok", "fitness": 0.012, "yz": 0.034}

``status`` is one of ok, degenerate, diverged or error (error records carry
an ``error`` message and a null ``job_id`` when none could be parsed).
Genomes use the single-line genome text format.  A worker refuses jobs whose
physics digest differs from its own configuration.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import socket
import socketserver
import threading
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field

from . import cppn
from .controller import decode_controller
from .errors import (
    BindFailure,
    EmptyMorphology,
    GenomeFormatError,
    NumericalDivergence,
    SamCoevoError,
    WorkerUnreachable,
)
from .morphology import CanvasDims, decode_morphology
from .physics import MaterialParams, SimConfig, simulate, upward_displacement, yz_displacement

log = logging.getLogger(__name__)

OK, DEGENERATE, DIVERGED, ERROR = "ok", "degenerate", "diverged", "error"


@dataclass(frozen=True)
class PhysicsSpec:
    params: MaterialParams = MaterialParams()
    sim: SimConfig = SimConfig()

    @property
    def digest(self) -> str:
        blob = json.dumps({"params": asdict(self.params), "sim": asdict(self.sim)},
                          sort_keys=True)
        return hashlib.sha256(blob.encode()).hexdigest()


@dataclass(frozen=True)
class EvalJob:
    job_id: int
    sam: str
    con: str
    canvas: CanvasDims
    physics_digest: str

    def to_wire(self) -> str:
        return json.dumps({"job_id": self.job_id, "canvas": list(self.canvas.shape),
                           "sam": self.sam, "con": self.con,
                           "physics_digest": self.physics_digest})

    @classmethod
    def from_wire(cls, line: str) -> "EvalJob":
        rec = json.loads(line)
        return cls(int(rec["job_id"]), str(rec["sam"]), str(rec["con"]),
                   CanvasDims(*(int(v) for v in rec["canvas"])), str(rec["physics_digest"]))


@dataclass(frozen=True)
class EvalResult:
    job_id: int | None
    status: str
    fitness: float = 0.0
    yz: float = 0.0
    error: str | None = field(default=None, compare=False)

    def to_wire(self) -> str:
        rec = {"job_id": self.job_id, "status": self.status,
               "fitness": self.fitness, "yz": self.yz}
        if self.error is not None:
            rec["error"] = self.error
        return json.dumps(rec)

    @classmethod
    def from_wire(cls, line: str) -> "EvalResult":
        rec = json.loads(line)
        return cls(rec["job_id"], rec["status"], float(rec["fitness"]), float(rec["yz"]),
                   rec.get("error"))


def make_jobs(pairs, canvas: CanvasDims, physics: PhysicsSpec, first_id: int = 0) -> list[EvalJob]:
    digest = physics.digest
    return [EvalJob(first_id + i, cppn.dumps(s, single_line=True), cppn.dumps(c, single_line=True),
                    canvas, digest)
            for i, (s, c) in enumerate(pairs)]


def evaluate_pair(sam, con, canvas: CanvasDims, physics: PhysicsSpec) -> tuple[str, float, float]:
    """Decode and simulate one pair; returns (status, upward displacement, yz displacement)."""
    try:
        grid = decode_morphology(sam, canvas)
    except EmptyMorphology:
        return DEGENERATE, 0.0, 0.0
    phases = decode_controller(con, grid)
    try:
        trace = simulate(grid, phases, physics.params, physics.sim)
    except NumericalDivergence:
        return DIVERGED, 0.0, 0.0
    return OK, upward_displacement(trace), yz_displacement(trace)


def run_job(job: EvalJob, physics: PhysicsSpec) -> EvalResult:
    if job.physics_digest != physics.digest:
        return EvalResult(job.job_id, ERROR, error="physics digest mismatch")
    try:
        sam, con = cppn.loads(job.sam), cppn.loads(job.con)
    except GenomeFormatError as exc:
        return EvalResult(job.job_id, ERROR, error=str(exc))
    status, fitness, yz = evaluate_pair(sam, con, job.canvas, physics)
    return EvalResult(job.job_id, status, fitness, yz)


# -- local process pool ----------------------------------------------------------

_WORKER_PHYSICS: PhysicsSpec | None = None


def _init_local(physics: PhysicsSpec) -> None:
    global _WORKER_PHYSICS
    _WORKER_PHYSICS = physics


def _run_local(job: EvalJob) -> EvalResult:
    return run_job(job, _WORKER_PHYSICS)


def default_worker_count() -> int:
    env = os.environ.get("EVAL_WORKERS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def parse_endpoint(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    return (host or "127.0.0.1"), int(port)


class WorkerPool:
    """Handle for local processes plus optional remote workers.

    ``workers=1`` evaluates in-process.  Use as a context manager or call
    ``close()`` to release the process pool.
    """

    def __init__(self, physics: PhysicsSpec = PhysicsSpec(), workers: int | None = None,
                 remotes=(), timeout: float = 60.0):
        self.physics = physics
        self.workers = default_worker_count() if workers is None else max(1, int(workers))
        self.remotes = [parse_endpoint(r) if isinstance(r, str) else tuple(r) for r in remotes]
        self.timeout = timeout
        self._executor: ProcessPoolExecutor | None = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def close(self) -> None:
        if self._executor is not None:
            self._executor.shutdown()
            self._executor = None

    def __getstate__(self):
        state = self.__dict__.copy()
        state["_executor"] = None
        return state

    def _local(self, jobs: list[EvalJob]) -> list[EvalResult]:
        if not jobs:
            return []
        if self.workers == 1:
            return [run_job(j, self.physics) for j in jobs]
        if self._executor is None:
            self._executor = ProcessPoolExecutor(self.workers, initializer=_init_local,
                                                 initargs=(self.physics,))
        chunk = max(1, len(jobs) // (4 * self.workers))
        return list(self._executor.map(_run_local, jobs, chunksize=chunk))

    def evaluate_batch(self, jobs: list[EvalJob]) -> list[EvalResult]:
        return evaluate_batch(jobs, self)


def _remote_batch(endpoint, jobs: list[EvalJob], timeout: float) -> list[EvalResult]:
    """Send ``jobs`` to one worker; raises WorkerUnreachable on any transport failure."""
    try:
        with socket.create_connection(endpoint, timeout=timeout) as sock:
            sock.sendall("".join(j.to_wire() + "\n" for j in jobs).encode())
            reader = sock.makefile("r", encoding="utf-8")
            results = []
            for _ in jobs:
                line = reader.readline()
                if not line:
                    raise WorkerUnreachable(f"{endpoint} closed the connection early")
                results.append(EvalResult.from_wire(line))
            return results
    except (OSError, ValueError, KeyError) as exc:
        raise WorkerUnreachable(f"{endpoint}: {exc}") from exc


def evaluate_batch(jobs: list[EvalJob], pool: WorkerPool) -> list[EvalResult]:
    """One result per job, ordered by job_id.

    Jobs are split round-robin over the remote workers and the local pool.
    Jobs whose remote worker fails (or answers with an error) are re-run
    locally; duplicate results are dropped by job_id.
    """
    if not jobs:
        raise ValueError("empty batch")
    ids = [j.job_id for j in jobs]
    if len(set(ids)) != len(ids):
        raise ValueError("job ids must be unique within a batch")
    lanes = len(pool.remotes) + 1
    shares = [jobs[k::lanes] for k in range(lanes)]
    done: dict[int, EvalResult] = {}
    retry: list[EvalJob] = []
    lock = threading.Lock()

    def remote(endpoint, share):
        try:
            results = _remote_batch(endpoint, share, pool.timeout)
        except WorkerUnreachable as exc:
            log.warning("worker unreachable, re-running %d jobs locally: %s", len(share), exc)
            with lock:
                retry.extend(share)
            return
        by_id = {j.job_id: j for j in share}
        with lock:
            for r in results:
                if r.status == ERROR or r.job_id not in by_id:
                    continue
                done.setdefault(r.job_id, r)
            retry.extend(j for j in share if j.job_id not in done)

    threads = [threading.Thread(target=remote, args=(ep, share))
               for ep, share in zip(pool.remotes, shares[1:]) if share]
    for t in threads:
        t.start()
    local_results = pool._local(shares[0])
    for t in threads:
        t.join()
    for r in local_results:
        done.setdefault(r.job_id, r)
    for r in pool._local(sorted(retry, key=lambda j: j.job_id)):
        done.setdefault(r.job_id, r)
    return [done[i] for i in sorted(done)]


# -- worker server ---------------------------------------------------------------

def handle_line(line: str, physics: PhysicsSpec) -> EvalResult:
    """Process one request line; never raises."""
    job_id = None
    try:
        rec = json.loads(line)
        if isinstance(rec, dict) and isinstance(rec.get("job_id"), int):
            job_id = rec["job_id"]
        job = EvalJob.from_wire(line)
    except (ValueError, KeyError, TypeError) as exc:
        return EvalResult(job_id, ERROR, error=f"malformed request: {exc}")
    try:
        return run_job(job, physics)
    except (SamCoevoError, ValueError) as exc:
        return EvalResult(job_id, ERROR, error=str(exc))


class _Handler(socketserver.StreamRequestHandler):
    def handle(self):
        for raw in self.rfile:
            line = raw.decode("utf-8", errors="replace").strip()
            if not line:
                continue
            result = handle_line(line, self.server.physics)
            self.wfile.write((result.to_wire() + "\n").encode())
            self.wfile.flush()


class WorkerServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True

    def __init__(self, address, physics: PhysicsSpec):
        self.physics = physics
        try:
            super().__init__(address, _Handler)
        except OSError as exc:
            raise BindFailure(f"cannot bind {address}: {exc}") from exc

    @property
    def endpoint(self) -> tuple[str, int]:
        return self.server_address[:2]

    def start_background(self) -> threading.Thread:
        t = threading.Thread(target=self.serve_forever, daemon=True)
        t.start()
        return t

    def stop(self) -> None:
        self.shutdown()
        self.server_close()


def serve_worker(listen: str | None = None, physics: PhysicsSpec = PhysicsSpec()) -> None:
    """Serve jobs on ``host:port`` (default ``$EVAL_LISTEN``) until interrupted."""
    listen = listen or os.environ.get("EVAL_LISTEN", "127.0.0.1:5555")
    server = WorkerServer(parse_endpoint(listen), physics)
    log.info("worker listening on %s:%d", *server.endpoint)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()


class PairEvaluator:
    """Callable mapping a list of (sam, controller) genome pairs to EvalResults."""

    def __init__(self, canvas: CanvasDims, pool: WorkerPool):
        self.canvas = canvas
        self.pool = pool
        self.simulations = 0

    @property
    def physics(self) -> PhysicsSpec:
        return self.pool.physics

    def __call__(self, pairs) -> list[EvalResult]:
        pairs = list(pairs)
        if not pairs:
            return []
        self.simulations += len(pairs)
        return evaluate_batch(make_jobs(pairs, self.canvas, self.pool.physics), self.pool)
