"""Process-per-service baseline: the conventional deployment being measured
against.

Every service is an OS process listening on a local stream socket; with
sidecars enabled each service additionally gets a forwarder process that
relays every frame (the interception-proxy stand-in), so each request hop
crosses two sockets instead of one and the bytes are copied at every
crossing.  Frames are length-prefixed (u32 big-endian) with a 1-byte type.

The driver runs the identical request sequence as the in-process harness;
shutdown collects per-service request counts for the same-work check.
"""

from __future__ import annotations

import os
import socket
import struct
import tempfile
import time
from multiprocessing import Process, get_context

from .workload import (
    BaselineConfig,
    BenchReport,
    Chain,
    ChildCrashed,
    SocketError,
    SpawnFailure,
    WorkloadSpec,
    ZeroIterations,
    build_report,
    payload_sequence,
    spin,
)

FRAME_REQ = 1
FRAME_SHUTDOWN = 2

_READY_TIMEOUT_S = 10.0


def send_frame(sock: socket.socket, kind: int, body: bytes) -> None:
    sock.sendall(struct.pack(">IB", len(body) + 1, kind) + body)


def recv_frame(sock: socket.socket) -> tuple[int, bytes] | None:
    header = _recv_exact(sock, 4)
    if header is None:
        return None
    (length,) = struct.unpack(">I", header)
    body = _recv_exact(sock, length)
    if body is None or length < 1:
        return None
    return body[0], body[1:]


def _recv_exact(sock: socket.socket, n: int) -> bytes | None:
    buf = b""
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            return None
        buf += chunk
    return buf


def _serve(listen_path: str):
    srv = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
    srv.bind(listen_path)
    srv.listen(1)
    conn, _ = srv.accept()
    return srv, conn


def service_main(listen_path: str, downstream_path: str | None, spin_ns: int) -> None:
    """One service process: spin, forward downstream (or echo), reply."""
    srv, conn = _serve(listen_path)
    downstream: socket.socket | None = None
    count = 0
    try:
        while True:
            frame = recv_frame(conn)
            if frame is None:
                break
            kind, body = frame
            if kind == FRAME_SHUTDOWN:
                counts = struct.pack(">I", count)
                if downstream_path is not None:
                    if downstream is None:
                        downstream = _connect(downstream_path)
                    send_frame(downstream, FRAME_SHUTDOWN, b"")
                    reply = recv_frame(downstream)
                    if reply is not None:
                        counts += reply[1]
                send_frame(conn, FRAME_SHUTDOWN, counts)
                break
            count += 1
            spin(spin_ns)
            if downstream_path is None:
                send_frame(conn, FRAME_REQ, body)
            else:
                if downstream is None:
                    downstream = _connect(downstream_path)
                send_frame(downstream, FRAME_REQ, body)
                reply = recv_frame(downstream)
                if reply is None:
                    break
                send_frame(conn, FRAME_REQ, reply[1])
    finally:
        conn.close()
        srv.close()
        if downstream is not None:
            downstream.close()


def sidecar_main(listen_path: str, service_path: str) -> None:
    """Forwarder process: relays every frame to the service and back."""
    srv, conn = _serve(listen_path)
    service: socket.socket | None = None
    try:
        while True:
            frame = recv_frame(conn)
            if frame is None:
                break
            if service is None:
                service = _connect(service_path)
            send_frame(service, frame[0], frame[1])
            reply = recv_frame(service)
            if reply is None:
                break
            send_frame(conn, reply[0], reply[1])
            if frame[0] == FRAME_SHUTDOWN:
                break
    finally:
        conn.close()
        srv.close()
        if service is not None:
            service.close()


def _connect(path: str, timeout_s: float = _READY_TIMEOUT_S) -> socket.socket:
    deadline = time.monotonic() + timeout_s
    while True:
        sock = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
        try:
            sock.connect(path)
            return sock
        except (ConnectionRefusedError, FileNotFoundError):
            sock.close()
            if time.monotonic() > deadline:
                raise SocketError(f"cannot connect to {path}") from None
            time.sleep(0.005)


class BaselineCluster:
    """Spawns and drives the per-service processes for one baseline run."""

    def __init__(self, spec: WorkloadSpec, cfg: BaselineConfig):
        self.spec = spec
        self.cfg = cfg
        self.children: list[tuple[str, Process]] = []
        self._tmp: tempfile.TemporaryDirectory | None = None
        self._driver_socks: list[socket.socket] = []
        self._ctx = get_context("fork")

    # -- lifecycle ---------------------------------------------------------

    def start(self) -> None:
        self._tmp = tempfile.TemporaryDirectory(prefix="meshwa-bench-")
        root = self._tmp.name
        spec = self.spec
        sidecar = self.cfg.sidecar

        def svc_path(i: int) -> str:
            return os.path.join(root, f"s{i}.sock")

        def side_path(i: int) -> str:
            return os.path.join(root, f"side{i}.sock")

        if isinstance(spec.topology, Chain):
            n = spec.topology.length
            for i in range(n):
                downstream = None
                if i + 1 < n:
                    downstream = side_path(i + 1) if sidecar else svc_path(i + 1)
                self._spawn(f"svc{i}", service_main, (svc_path(i), downstream, spec.compute_spin_ns))
                if sidecar:
                    self._spawn(f"sidecar{i}", sidecar_main, (side_path(i), svc_path(i)))
            entries = [side_path(0) if sidecar else svc_path(0)]
        else:
            n = spec.topology.width
            for i in range(n):
                self._spawn(f"svc{i}", service_main, (svc_path(i), None, spec.compute_spin_ns))
                if sidecar:
                    self._spawn(f"sidecar{i}", sidecar_main, (side_path(i), svc_path(i)))
            entries = [side_path(i) if sidecar else svc_path(i) for i in range(n)]

        self._await_sockets()
        self._driver_socks = [_connect(path) for path in entries]

    def _spawn(self, name: str, target, args) -> None:
        try:
            proc = self._ctx.Process(target=target, args=args, daemon=True, name=name)
            proc.start()
        except OSError as exc:
            raise SpawnFailure(f"cannot spawn {name}: {exc}") from exc
        self.children.append((name, proc))

    def _await_sockets(self) -> None:
        assert self._tmp is not None
        want = {name: p for name, p in self.children}
        deadline = time.monotonic() + _READY_TIMEOUT_S
        expected = len(self.children)
        while time.monotonic() < deadline:
            socks = [f for f in os.listdir(self._tmp.name) if f.endswith(".sock")]
            if len(socks) >= expected:
                return
            for name, proc in want.items():
                if not proc.is_alive() and proc.exitcode not in (0, None):
                    raise SpawnFailure(f"{name} exited {proc.exitcode} during startup")
            time.sleep(0.005)
        raise SpawnFailure("children did not create their sockets in time")

    def process_count(self) -> int:
        return len(self.children)

    # -- driving -------------------------------------------------------------

    def request(self, payload: bytes) -> list[bytes]:
        """One closed-loop request over the topology; returns each echo."""
        out = []
        for sock in self._driver_socks:
            try:
                send_frame(sock, FRAME_REQ, payload)
                reply = recv_frame(sock)
            except OSError as exc:
                raise self._diagnose(str(exc)) from None
            if reply is None:
                raise self._diagnose("connection closed mid-request")
            out.append(reply[1])
        return out

    def _diagnose(self, detail: str) -> Exception:
        for name, proc in self.children:
            if not proc.is_alive():
                return ChildCrashed(name)
        return SocketError(detail)

    def shutdown_counts(self) -> list[int]:
        """Collect per-service request counts and let children exit."""
        counts: list[int] = []
        for sock in self._driver_socks:
            try:
                send_frame(sock, FRAME_SHUTDOWN, b"")
                reply = recv_frame(sock)
            except OSError as exc:
                raise self._diagnose(str(exc)) from None
            if reply is None:
                raise self._diagnose("no shutdown reply")
            body = reply[1]
            counts.extend(
                struct.unpack(">I", body[i : i + 4])[0] for i in range(0, len(body), 4)
            )
        return counts

    def terminate(self) -> None:
        for sock in self._driver_socks:
            try:
                sock.close()
            except OSError:
                pass
        self._driver_socks = []
        for _, proc in self.children:
            proc.join(timeout=2.0)
            if proc.is_alive():
                proc.terminate()
                proc.join(timeout=2.0)
        self.children = []
        if self._tmp is not None:
            self._tmp.cleanup()
            self._tmp = None


def run_process_baseline(
    spec: WorkloadSpec, cfg: BaselineConfig | None = None, *, config_id: str = "process_baseline"
) -> BenchReport:
    """Run the identical workload as one OS process per service (plus one
    forwarder per service when sidecar is enabled) over local sockets."""
    if spec.iterations < 1:
        raise ZeroIterations("iterations must be >= 1")
    cfg = cfg or BaselineConfig()
    payloads = payload_sequence(spec)
    cluster = BaselineCluster(spec, cfg)
    cluster.start()
    try:
        for i in range(spec.warmup_iterations):
            cluster.request(payloads[i])

        latencies: list[int] = []
        t_begin = time.perf_counter_ns()
        for i in range(spec.iterations):
            data = payloads[spec.warmup_iterations + i]
            t0 = time.perf_counter_ns()
            replies = cluster.request(data)
            latencies.append(time.perf_counter_ns() - t0)
            if any(r != data for r in replies):
                raise AssertionError("echo mismatch in baseline")
        total = time.perf_counter_ns() - t_begin

        counts = cluster.shutdown_counts()
        return build_report(config_id, spec, latencies, total, hop_counts=tuple(counts))
    finally:
        cluster.terminate()
