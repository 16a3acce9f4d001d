"""Distributed search topology: population server, fingerprint server, workers.

One message schema serves two transports: an in-process client that calls
service handlers directly, and a TCP client speaking length-prefixed JSON
frames (4-byte big-endian length, UTF-8 body with a "kind" field). The
population service owns all population mutations and assigns birth
indices; the budget is the count of accepted child submissions, so
multi-worker runs stop after a deterministic amount of total work. The
fingerprint service is a first-write-wins map. Plain TCP, no auth:
a trusted-network tool.
"""

from __future__ import annotations

import json
import socket
import socketserver
import struct
import threading
import time

import numpy as np

from .evolution import (
    FitnessCache,
    HistoryRow,
    Individual,
    Population,
    SearchConfig,
    SearchState,
    seed_population,
    tournament_select,
    train_candidate,
)
from .forms import form_from_dict, form_to_dict
from .mutation import mutate

MAX_FRAME = 64 * 1024 * 1024


class ProtocolError(Exception):
    pass


class WorkerDisconnected(Exception):
    pass


def encode_frame(msg: dict) -> bytes:
    body = json.dumps(msg, separators=(",", ":")).encode()
    if len(body) > MAX_FRAME:
        raise ProtocolError(f"frame too large: {len(body)}")
    return struct.pack(">I", len(body)) + body


def decode_body(body: bytes) -> dict:
    msg = json.loads(body.decode())
    if not isinstance(msg, dict) or "kind" not in msg:
        raise ProtocolError("frame body must be an object with a 'kind'")
    return msg


def _read_exact(rfile, n: int) -> bytes | None:
    chunks = b""
    while len(chunks) < n:
        part = rfile.read(n - len(chunks))
        if not part:
            return None
        chunks += part
    return chunks


def read_frame(rfile) -> dict | None:
    """One frame from a stream; None on clean EOF."""
    head = _read_exact(rfile, 4)
    if head is None:
        return None
    (length,) = struct.unpack(">I", head)
    if length > MAX_FRAME:
        raise ProtocolError(f"frame too large: {length}")
    body = _read_exact(rfile, length)
    if body is None:
        raise ProtocolError("truncated frame")
    return decode_body(body)


# --- services --------------------------------------------------------------


class PopulationService:
    """Serialized owner of the population, budget, history, and best."""

    def __init__(self, cfg: SearchConfig, state: SearchState):
        self.cfg = cfg
        self.state = state
        self.lock = threading.Lock()
        self.rng = np.random.default_rng(np.random.SeedSequence(entropy=(cfg.seed, 1)))
        self.submitted = 0
        self.done = threading.Event()
        if cfg.budget == 0:
            self.done.set()

    def budget_left(self) -> int:
        return self.cfg.budget - self.submitted

    def handle(self, msg: dict) -> dict:
        kind = msg.get("kind")
        with self.lock:
            if kind == "GET_PARENT":
                return self._get_parent()
            if kind == "SUBMIT_CHILD":
                return self._submit(msg)
            if kind == "SHUTDOWN":
                self.done.set()
                return {"kind": "ACK", "accepted": True}
        return {"kind": "ERROR", "error": f"unsupported kind {kind!r}"}

    def _get_parent(self) -> dict:
        if self.budget_left() <= 0:
            return {"kind": "SHUTDOWN"}
        if len(self.state.population) == 0:
            return {"kind": "ERROR", "error": "empty-population"}
        parent = tournament_select(self.state.population, self.cfg.tournament_size, self.rng)
        return {
            "kind": "PARENT",
            "form": form_to_dict(parent.form),
            "digests": list(parent.digests),
            "digest": parent.digest,
        }

    def _submit(self, msg: dict) -> dict:
        if self.budget_left() <= 0:
            return {"kind": "ACK", "accepted": False, "stop": True}
        form = form_from_dict(msg["form"])
        birth = self.state.birth_counter
        self.state.birth_counter += 1
        self.submitted += 1
        ind = Individual(
            form,
            np.asarray(msg["params"], dtype=np.float64),
            -msg["j_val"],
            msg["j_train"],
            msg["j_val"],
            birth,
            tuple(msg["digests"]),
            msg.get("evals_used", 0),
        )
        self.state.population.insert(ind)
        self.state.note_best(ind)
        self.state.history.append(
            HistoryRow(
                birth,
                msg.get("parent_digest", 0),
                ind.digest,
                ind.j_train,
                ind.j_val,
                ind.evals_used,
                msg.get("wall_ms", 0.0),
            )
        )
        if self.budget_left() <= 0:
            self.done.set()
        return {"kind": "ACK", "accepted": True, "budget_left": self.budget_left()}


class FingerprintService:
    """Digest-triple cache with first-write-wins stores."""

    def __init__(self, cache: FitnessCache | None = None):
        self.cache = cache or FitnessCache()
        self.lock = threading.Lock()

    def handle(self, msg: dict) -> dict:
        kind = msg.get("kind")
        with self.lock:
            if kind == "FP_CHECK":
                entry = self.cache.lookup(tuple(msg["digests"]))
                if entry is None:
                    return {"kind": "FP_MISS"}
                fitness, j_train, j_val, params = entry
                return {
                    "kind": "FP_HIT",
                    "fitness": fitness,
                    "j_train": j_train,
                    "j_val": j_val,
                    "params": list(map(float, params)),
                }
            if kind == "FP_STORE":
                self.cache.store(
                    tuple(msg["digests"]),
                    msg["fitness"],
                    msg["j_train"],
                    msg["j_val"],
                    np.asarray(msg["params"], dtype=np.float64),
                )
                return {"kind": "ACK", "accepted": True}
            if kind == "SHUTDOWN":
                return {"kind": "ACK", "accepted": True}
        return {"kind": "ERROR", "error": f"unsupported kind {kind!r}"}


# --- transports --------------------------------------------------------------


class InProcessClient:
    def __init__(self, service):
        self.service = service

    def request(self, msg: dict) -> dict:
        return self.service.handle(msg)

    def close(self) -> None:
        pass


class TcpClient:
    """Persistent connection with bounded exponential backoff on reconnects."""

    def __init__(self, host: str, port: int, max_retries: int = 6, backoff: float = 0.05):
        self.host = host
        self.port = port
        self.max_retries = max_retries
        self.backoff = backoff
        self._sock: socket.socket | None = None
        self._rfile = None

    def _connect(self) -> None:
        self._sock = socket.create_connection((self.host, self.port), timeout=60.0)
        self._sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        self._rfile = self._sock.makefile("rb")

    def request(self, msg: dict) -> dict:
        attempt = 0
        while True:
            try:
                if self._sock is None:
                    self._connect()
                self._sock.sendall(encode_frame(msg))
                reply = read_frame(self._rfile)
                if reply is None:
                    raise ConnectionError("server closed connection")
                return reply
            except (OSError, ConnectionError):
                self.close()
                attempt += 1
                if attempt > self.max_retries:
                    raise WorkerDisconnected(
                        f"{self.host}:{self.port} unreachable after {attempt - 1} retries"
                    ) from None
                time.sleep(self.backoff * (2 ** (attempt - 1)))

    def close(self) -> None:
        if self._sock is not None:
            try:
                if self._rfile is not None:
                    self._rfile.close()
                self._sock.close()
            finally:
                self._sock = None
                self._rfile = None


class _FrameHandler(socketserver.StreamRequestHandler):
    def handle(self):
        while True:
            try:
                msg = read_frame(self.rfile)
            except ProtocolError as e:
                self.wfile.write(encode_frame({"kind": "ERROR", "error": str(e)}))
                return
            if msg is None:
                return
            reply = self.server.service.handle(msg)
            self.wfile.write(encode_frame(reply))


class _FrameServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True


class ServerHandle:
    def __init__(self, server: _FrameServer, thread: threading.Thread):
        self.server = server
        self.thread = thread

    @property
    def address(self) -> tuple[str, int]:
        return self.server.server_address[:2]

    def shutdown(self) -> None:
        self.server.shutdown()
        self.server.server_close()
        self.thread.join(timeout=10)


def serve(service, bind_address: tuple[str, int]) -> ServerHandle:
    """Run a service on a TCP endpoint in a daemon thread."""
    server = _FrameServer(bind_address, _FrameHandler)
    server.service = service
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    return ServerHandle(server, thread)


def serve_population(cfg: SearchConfig, state: SearchState, bind_address) -> ServerHandle:
    return serve(PopulationService(cfg, state), bind_address)


def serve_fingerprints(bind_address, cache: FitnessCache | None = None) -> ServerHandle:
    return serve(FingerprintService(cache), bind_address)


# --- worker -----------------------------------------------------------------


def worker_loop(pop_client, fp_client, ctx, cfg: SearchConfig, seed: int) -> int:
    """Mutation/training loop; returns the number of accepted submissions."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=(seed, 3)))
    counter = 0
    accepted = 0
    while True:
        resp = pop_client.request({"kind": "GET_PARENT"})
        kind = resp.get("kind")
        if kind == "SHUTDOWN":
            return accepted
        if kind == "ERROR":
            raise ProtocolError(resp.get("error", "unknown error"))
        t0 = time.perf_counter()
        parent_form = form_from_dict(resp["form"])
        child = mutate(parent_form, cfg.mutation, rng)
        digests = child.digests()
        check = fp_client.request({"kind": "FP_CHECK", "digests": list(digests)})
        if check["kind"] == "FP_HIT":
            params = np.asarray(check["params"], dtype=np.float64)
            j_train, j_val, evals = check["j_train"], check["j_val"], 0
        else:
            train_seed = int(
                np.random.SeedSequence(entropy=(seed, 4, counter)).generate_state(1)[0]
            )
            params, j_train, j_val, evals = train_candidate(child, ctx, cfg, train_seed)
            fp_client.request(
                {
                    "kind": "FP_STORE",
                    "digests": list(digests),
                    "fitness": -j_val,
                    "j_train": j_train,
                    "j_val": j_val,
                    "params": list(map(float, params)),
                }
            )
        counter += 1
        ack = pop_client.request(
            {
                "kind": "SUBMIT_CHILD",
                "form": form_to_dict(child),
                "digests": list(digests),
                "params": list(map(float, params)),
                "j_train": float(j_train),
                "j_val": float(j_val),
                "evals_used": int(evals),
                "parent_digest": resp.get("digest", 0),
                "wall_ms": (time.perf_counter() - t0) * 1e3,
            }
        )
        if ack.get("accepted"):
            accepted += 1


def run_coordinated(cfg: SearchConfig, dataset, seed_forms, n_workers: int = 1):
    """In-process run of the full topology (threads, no sockets)."""
    from .objective import ObjectiveContext

    ctx = ObjectiveContext(dataset, cfg.omega)
    state = SearchState(Population(cfg.capacity), FitnessCache(), [])
    seed_population(state, seed_forms, ctx, cfg)
    pop_service = PopulationService(cfg, state)
    fp_service = FingerprintService(state.cache)
    threads = []
    for i in range(n_workers):
        t = threading.Thread(
            target=worker_loop,
            args=(
                InProcessClient(pop_service),
                InProcessClient(fp_service),
                ctx,
                cfg,
                cfg.seed + 1000 * (i + 1),
            ),
            daemon=True,
        )
        t.start()
        threads.append(t)
    for t in threads:
        t.join()
    return state, ctx
