"""TCP binding for the node roles: framed message transport, threaded
servers, and small typed clients.

One request/response in flight per connection. Servers answer CLOCK_PING
so any node can act as a time reference. All servers are daemon-threaded
and shut down cleanly via stop().
"""

import socket
import socketserver
import threading
import time
from typing import Callable, Optional, Tuple

import numpy as np

from .datanode import DataStore, SampleBatch
from .inference import InferenceCore, InferenceError
from .policy import PolicySnapshot, TrainState, run_online_finetune
from .protocol import (
    ProtocolError,
    decode_message,
    encode_message,
    episode_from_message,
    episode_put_message,
    make_message,
    try_decode_buffer,
    weights_from_message,
    weights_push_message,
)
from .trajvalidate import Episode

RECV_CHUNK = 65536


class ConnectionClosed(ConnectionError):
    pass


def send_message(sock: socket.socket, msg: dict) -> None:
    sock.sendall(encode_message(msg))


def recv_message(sock: socket.socket, buffer: bytearray) -> Optional[dict]:
    """Read one framed message, buffering any overrun for the next call.

    Returns None on clean EOF at a frame boundary; raises ConnectionClosed
    when the peer vanishes mid-frame.
    """
    while True:
        got = try_decode_buffer(bytes(buffer))
        if got is not None:
            msg, used = got
            del buffer[:used]
            return msg
        data = sock.recv(RECV_CHUNK)
        if not data:
            if buffer:
                raise ConnectionClosed("peer closed mid-frame")
            return None
        buffer.extend(data)


class _Handler(socketserver.BaseRequestHandler):
    def handle(self):
        buffer = bytearray()
        state = {}
        while True:
            try:
                msg = recv_message(self.request, buffer)
            except (ConnectionClosed, ConnectionError, OSError):
                return
            except ProtocolError as err:
                try:
                    send_message(
                        self.request, make_message("ERROR", code=err.code, detail=err.detail)
                    )
                except OSError:
                    pass
                return
            if msg is None:
                return
            try:
                reply = self.server.node.handle_message(msg, state)
            except ProtocolError as err:
                reply = make_message("ERROR", code=err.code, detail=err.detail)
            except InferenceError as err:
                reply = make_message("ERROR", code=err.code, detail=err.detail)
            except (ValueError, KeyError, TypeError) as err:
                reply = make_message("ERROR", code="BAD_REQUEST", detail=str(err))
            try:
                send_message(self.request, reply)
            except OSError:
                return


class _Server(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True


class NodeServer:
    """Base node: owns a TCP server thread and answers clock pings.

    clock_offset_ns skews the advertised server clock, which lets tests
    stand up a peer whose clock genuinely differs.
    """

    def __init__(self, host: str = "127.0.0.1", port: int = 0, clock_offset_ns: int = 0):
        self.clock_offset_ns = clock_offset_ns
        self._server = _Server((host, port), _Handler)
        self._server.node = self
        self._thread: Optional[threading.Thread] = None

    @property
    def address(self) -> Tuple[str, int]:
        return self._server.server_address[:2]

    def start(self) -> "NodeServer":
        self._thread = threading.Thread(target=self._server.serve_forever, daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        self._server.shutdown()
        self._server.server_close()
        if self._thread:
            self._thread.join(timeout=5)

    def _now_ns(self) -> int:
        return time.time_ns() + self.clock_offset_ns

    def handle_message(self, msg: dict, state: dict) -> dict:
        if msg["type"] == "CLOCK_PING":
            t2 = self._now_ns()
            return make_message("CLOCK_PONG", t1=msg["t1"], t2=t2, t3=self._now_ns())
        if msg["type"] == "HELLO":
            state["session_id"] = msg["session_id"]
            state["role"] = msg["role"]
            return make_message("ACK", id=msg["session_id"])
        raise ProtocolError("UNSUPPORTED", f"{type(self).__name__} ignores {msg['type']}")


class DataNodeServer(NodeServer):
    def __init__(self, store: DataStore, **kw):
        super().__init__(**kw)
        self.store = store

    def handle_message(self, msg: dict, state: dict) -> dict:
        mtype = msg["type"]
        if mtype == "EPISODE_PUT":
            ep = episode_from_message(msg)
            result = self.store.ingest_episode(ep)
            if not result.accepted:
                bad = [i for i, t in enumerate(result.report.frame_tags) if t]
                raise ProtocolError(
                    "VALIDATION_REJECT",
                    f"{result.report.invalid_count} invalid frames at {bad[:20]}",
                )
            return make_message("ACK", id=result.episode_id)
        if mtype == "SAMPLE_REQ":
            batch = self.store.sample_batch(
                int(msg["n"]),
                float(msg["offline_fraction"]),
                rng_seed=int(msg.get("rng_seed", 0)),
            )
            items = [
                {"obs": [float(x) for x in o], "target": [[float(x) for x in row] for row in t]}
                for o, t in batch.items
            ]
            return make_message(
                "SAMPLE_RESP", items=items, composition=list(batch.composition)
            )
        if mtype == "STATS_REQ":
            return make_message("STATS_RESP", counts=self.store.stats(), versions=[])
        return super().handle_message(msg, state)


class InferenceServer(NodeServer):
    def __init__(self, core: InferenceCore, **kw):
        super().__init__(**kw)
        self.core = core

    def handle_message(self, msg: dict, state: dict) -> dict:
        mtype = msg["type"]
        if mtype == "HELLO":
            self.core.start_session(msg["session_id"], msg["role"])
            state["session_id"] = msg["session_id"]
            return make_message("ACK", id=msg["session_id"])
        if mtype == "INFER_REQ":
            start = time.perf_counter_ns()
            chunk, version, _ = self.core.infer(
                msg["session_id"], np.array(msg["obs"], dtype=float)
            )
            micros = (time.perf_counter_ns() - start) // 1000
            return make_message(
                "INFER_RESP",
                chunk=[[float(x) for x in row] for row in chunk],
                model_version=version,
                server_micros=int(micros),
            )
        if mtype == "WEIGHTS_PUSH":
            wire = weights_from_message(msg)
            snapshot = PolicySnapshot.from_wire(self.core.arch, wire)
            version = self.core.install(snapshot)
            return make_message("ACK", id=f"v{version}")
        if mtype == "STATS_REQ":
            stats = self.core.stats()
            versions = sorted(int(v) for v in stats["version_counts"])
            return make_message("STATS_RESP", counts=stats, versions=versions)
        return super().handle_message(msg, state)


class TrainerServer(NodeServer):
    """Control endpoint around an asynchronous finetuning thread."""

    def __init__(
        self,
        state: TrainState,
        store_client_factory: Callable[[], "DataClient"],
        publish: Callable[[PolicySnapshot], None],
        **kw,
    ):
        super().__init__(**kw)
        self._train_state = state
        self._store_client_factory = store_client_factory
        self._publish = publish
        self._lock = threading.Lock()
        self._stop_flag = threading.Event()
        self._worker: Optional[threading.Thread] = None
        self._last_error: Optional[str] = None

    def _loop(self, max_steps: Optional[int]):
        client = self._store_client_factory()
        done = 0
        try:
            while not self._stop_flag.is_set():
                if max_steps is not None and done >= max_steps:
                    break
                run_online_finetune(client, self._train_state, steps=1, publish=self._publish)
                done += 1
        except Exception as exc:  # surfaced through status
            self._last_error = f"{type(exc).__name__}: {exc}"
        finally:
            close = getattr(client, "close", None)
            if close:
                close()

    def running(self) -> bool:
        return self._worker is not None and self._worker.is_alive()

    def start_training(self, max_steps: Optional[int] = None) -> dict:
        with self._lock:
            if self.running():
                return self.status()
            self._stop_flag.clear()
            self._last_error = None
            self._worker = threading.Thread(target=self._loop, args=(max_steps,), daemon=True)
            self._worker.start()
        return self.status()

    def stop_training(self) -> dict:
        with self._lock:
            self._stop_flag.set()
            if self._worker:
                self._worker.join(timeout=10)
        return self.status()

    def status(self) -> dict:
        return {
            "running": self.running(),
            "steps_done": self._train_state.steps_done,
            "version": self._train_state.version,
            "error": self._last_error,
        }

    def handle_message(self, msg: dict, state: dict) -> dict:
        if msg["type"] == "TRAIN_CMD":
            command = msg["command"]
            if command == "start":
                out = self.start_training(msg.get("max_steps"))
            elif command == "stop":
                out = self.stop_training()
            elif command == "status":
                out = self.status()
            else:
                raise ProtocolError("BAD_REQUEST", f"unknown command {command!r}")
            return make_message("TRAIN_STATE", state=out)
        return super().handle_message(msg, state)


# --- clients ----------------------------------------------------------------


class NodeClient:
    def __init__(self, address: Tuple[str, int], timeout_s: float = 10.0, retries: int = 5):
        self.address = address
        self.timeout_s = timeout_s
        self.retries = retries
        self._sock: Optional[socket.socket] = None
        self._buffer = bytearray()

    def _connect(self) -> socket.socket:
        delay = 0.05
        last: Optional[Exception] = None
        for _ in range(self.retries):
            try:
                sock = socket.create_connection(self.address, timeout=self.timeout_s)
                sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                return sock
            except OSError as exc:
                last = exc
                time.sleep(delay)
                delay = min(delay * 2, 1.0)
        raise ConnectionError(f"cannot reach {self.address}: {last}")

    def _ensure(self) -> socket.socket:
        if self._sock is None:
            self._sock = self._connect()
            self._buffer = bytearray()
        return self._sock

    def request(self, msg: dict) -> dict:
        sock = self._ensure()
        try:
            send_message(sock, msg)
            reply = recv_message(sock, self._buffer)
        except (ConnectionError, OSError):
            self.close()
            # one reconnect attempt per request keeps transient drops quiet
            sock = self._ensure()
            send_message(sock, msg)
            reply = recv_message(sock, self._buffer)
        if reply is None:
            self.close()
            raise ConnectionClosed("server closed the connection")
        return reply

    def request_ok(self, msg: dict) -> dict:
        reply = self.request(msg)
        if reply["type"] == "ERROR":
            raise ProtocolError(reply["code"], reply.get("detail", ""))
        return reply

    def clock_sample(self):
        from .spacetime import ClockSample

        t1 = time.time_ns()
        reply = self.request_ok(make_message("CLOCK_PING", t1=t1))
        t4 = time.time_ns()
        return ClockSample(t1=reply["t1"], t2=reply["t2"], t3=reply["t3"], t4=t4)

    def close(self) -> None:
        if self._sock is not None:
            try:
                self._sock.close()
            finally:
                self._sock = None
                self._buffer = bytearray()


class DataClient(NodeClient):
    def put_episode(self, ep: Episode) -> str:
        return self.request_ok(episode_put_message(ep))["id"]

    def sample_batch(self, n: int, offline_fraction: float = 0.5, rng_seed: int = 0) -> SampleBatch:
        reply = self.request_ok(
            make_message(
                "SAMPLE_REQ", n=n, offline_fraction=offline_fraction, rng_seed=rng_seed
            )
        )
        items = [
            (np.array(it["obs"], dtype=float), np.array(it["target"], dtype=float))
            for it in reply["items"]
        ]
        return SampleBatch(items=items, composition=tuple(reply["composition"]))

    def stats(self) -> dict:
        return self.request_ok(make_message("STATS_REQ"))["counts"]


class InferClient(NodeClient):
    def __init__(self, address, session_id: str = "client", role: str = "device", **kw):
        super().__init__(address, **kw)
        self.session_id = session_id
        self.role = role
        self._greeted = False

    def hello(self) -> str:
        out = self.request_ok(
            make_message("HELLO", session_id=self.session_id, role=self.role)
        )["id"]
        self._greeted = True
        return out

    def infer(self, obs) -> Tuple[np.ndarray, int, int]:
        if not self._greeted:
            self.hello()
        reply = self.request_ok(
            make_message(
                "INFER_REQ", session_id=self.session_id, obs=[float(x) for x in obs]
            )
        )
        return (
            np.array(reply["chunk"], dtype=float),
            int(reply["model_version"]),
            int(reply["server_micros"]),
        )

    def push_weights(self, snapshot: PolicySnapshot) -> str:
        return self.request_ok(weights_push_message(snapshot.to_wire()))["id"]

    def stats(self) -> dict:
        return self.request_ok(make_message("STATS_REQ"))["counts"]


class TrainClient(NodeClient):
    def command(self, command: str, **fields) -> dict:
        return self.request_ok(make_message("TRAIN_CMD", command=command, **fields))["state"]

    def start(self, max_steps: Optional[int] = None) -> dict:
        fields = {"max_steps": max_steps} if max_steps is not None else {}
        return self.command("start", **fields)

    def stop(self) -> dict:
        return self.command("stop")

    def status(self) -> dict:
        return self.command("status")
