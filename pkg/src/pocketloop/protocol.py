"""Wire schema and on-disk formats for node-to-node traffic.

Framing is a 4-byte big-endian length prefix followed by a UTF-8 JSON
object with a mandatory "type" field. Floats ride as JSON numbers in
shortest round-trip decimal form, so every binary64 value survives
encode/decode bit-exactly. Weight snapshots use a separate binary layout
(32-bit little-endian floats, CRC-checked) carried over the JSON plane as
base64. Episodes persist as JSON lines: one header line, one line per
frame.
"""

import base64
import json
import os
import struct
import zlib
from dataclasses import dataclass
from typing import IO, List, Optional, Sequence, Tuple

import numpy as np

from .geometry import Pose
from .trajvalidate import Episode, Frame

MAX_FRAME_BYTES = 64 * 1024 * 1024

WEIGHT_MAGIC = b"RPKT"
WEIGHT_FORMAT_VERSION = 1

# default bind/connect points for the three node roles
DATA_PORT = 7701
INFER_PORT = 7702
TRAIN_PORT = 7703
ENV_DATA_ADDR = "POCKETLOOP_DATA_ADDR"
ENV_INFER_ADDR = "POCKETLOOP_INFER_ADDR"
ENV_TRAIN_ADDR = "POCKETLOOP_TRAIN_ADDR"

# error classification codes
E_OVERSIZE = "OVERSIZE"
E_TRUNCATED = "TRUNCATED"
E_UNKNOWN_TYPE = "UNKNOWN_TYPE"
E_MALFORMED = "MALFORMED"
E_BAD_MAGIC = "BAD_MAGIC"
E_CRC_MISMATCH = "CRC_MISMATCH"
E_SHAPE_MISMATCH = "SHAPE_MISMATCH"
E_EMPTY_EPISODE = "EMPTY_EPISODE"

MESSAGE_FIELDS = {
    "HELLO": ("session_id", "role"),
    "CLOCK_PING": ("t1",),
    "CLOCK_PONG": ("t1", "t2", "t3"),
    "INFER_REQ": ("session_id", "obs"),
    "INFER_RESP": ("chunk", "model_version", "server_micros"),
    "EPISODE_PUT": ("episode",),
    "ACK": ("id",),
    "SAMPLE_REQ": ("n", "offline_fraction"),
    "SAMPLE_RESP": ("items",),
    "WEIGHTS_PUSH": ("model_version", "blob"),
    "STATS_REQ": (),
    "STATS_RESP": ("counts", "versions"),
    "TRAIN_CMD": ("command",),
    "TRAIN_STATE": ("state",),
    "ERROR": ("code", "detail"),
}


class ProtocolError(Exception):
    def __init__(self, code: str, detail: str = ""):
        super().__init__(f"{code}: {detail}" if detail else code)
        self.code = code
        self.detail = detail


def parse_addr(text: str, default_port: int) -> Tuple[str, int]:
    """Parse "host", "host:port", or ":port" into a (host, port) pair."""
    host, sep, port = text.rpartition(":")
    if not sep:
        return text or "127.0.0.1", default_port
    return host or "127.0.0.1", int(port)


def _addr_from_env(env_name: str, default_port: int) -> Tuple[str, int]:
    value = os.environ.get(env_name, "")
    if not value:
        return "127.0.0.1", default_port
    return parse_addr(value, default_port)


def data_addr() -> Tuple[str, int]:
    return _addr_from_env(ENV_DATA_ADDR, DATA_PORT)


def infer_addr() -> Tuple[str, int]:
    return _addr_from_env(ENV_INFER_ADDR, INFER_PORT)


def train_addr() -> Tuple[str, int]:
    return _addr_from_env(ENV_TRAIN_ADDR, TRAIN_PORT)


def _dump(obj) -> bytes:
    return json.dumps(obj, separators=(",", ":"), allow_nan=False).encode("utf-8")


def encode_message(msg: dict) -> bytes:
    mtype = msg.get("type")
    if mtype not in MESSAGE_FIELDS:
        raise ProtocolError(E_UNKNOWN_TYPE, f"cannot encode type {mtype!r}")
    payload = _dump(msg)
    if len(payload) > MAX_FRAME_BYTES:
        raise ProtocolError(E_OVERSIZE, f"payload is {len(payload)} bytes")
    return struct.pack("!I", len(payload)) + payload


def _parse_payload(payload: bytes) -> dict:
    try:
        msg = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ProtocolError(E_MALFORMED, str(exc)) from exc
    if not isinstance(msg, dict):
        raise ProtocolError(E_MALFORMED, "payload is not an object")
    mtype = msg.get("type")
    if mtype not in MESSAGE_FIELDS:
        raise ProtocolError(E_UNKNOWN_TYPE, f"unknown type {mtype!r}")
    missing = [f for f in MESSAGE_FIELDS[mtype] if f not in msg]
    if missing:
        raise ProtocolError(E_MALFORMED, f"{mtype} missing fields {missing}")
    return msg


def decode_message(frame: bytes) -> dict:
    """Decode exactly one framed message."""
    if len(frame) < 4:
        raise ProtocolError(E_TRUNCATED, "frame shorter than length prefix")
    (length,) = struct.unpack("!I", frame[:4])
    if length > MAX_FRAME_BYTES:
        raise ProtocolError(E_OVERSIZE, f"prefix claims {length} bytes")
    if len(frame) < 4 + length:
        raise ProtocolError(E_TRUNCATED, f"have {len(frame) - 4} of {length} payload bytes")
    if len(frame) > 4 + length:
        raise ProtocolError(E_MALFORMED, "trailing bytes after frame")
    return _parse_payload(frame[4 : 4 + length])


def try_decode_buffer(buf: bytes) -> Optional[Tuple[dict, int]]:
    """Decode the first complete frame in an accumulation buffer.

    Returns (message, bytes_consumed), or None when more bytes are needed.
    Raises on frames that can never become valid (oversize, malformed).
    """
    if len(buf) < 4:
        return None
    (length,) = struct.unpack("!I", buf[:4])
    if length > MAX_FRAME_BYTES:
        raise ProtocolError(E_OVERSIZE, f"prefix claims {length} bytes")
    if len(buf) < 4 + length:
        return None
    return _parse_payload(buf[4 : 4 + length]), 4 + length


def make_message(mtype: str, **fields) -> dict:
    msg = {"type": mtype}
    msg.update(fields)
    return msg


# --- weight snapshots ------------------------------------------------------


@dataclass(frozen=True)
class WeightSnapshot:
    """Named float tensors plus a version counter.

    Values are held as float64 but must be exactly representable in
    float32, which is the wire precision; build instances through
    `quantized` unless the arrays already satisfy that.
    """

    model_version: int
    layers: Tuple[Tuple[str, np.ndarray], ...]

    def __post_init__(self):
        if self.model_version < 0:
            raise ValueError("model_version must be nonnegative")
        for name, arr in self.layers:
            if not name:
                raise ValueError("layer names must be nonempty")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"layer {name!r} has non-finite values")
            if not np.array_equal(arr, arr.astype(np.float32).astype(np.float64)):
                raise ValueError(f"layer {name!r} is not exactly float32-representable")

    @staticmethod
    def quantized(model_version: int, layers: Sequence[Tuple[str, np.ndarray]]) -> "WeightSnapshot":
        quant = tuple(
            (name, np.asarray(arr, dtype=np.float64).astype(np.float32).astype(np.float64))
            for name, arr in layers
        )
        return WeightSnapshot(model_version, quant)


def write_weights(snapshot: WeightSnapshot) -> bytes:
    out = bytearray()
    out += WEIGHT_MAGIC
    out += struct.pack("<III", WEIGHT_FORMAT_VERSION, snapshot.model_version, len(snapshot.layers))
    for name, arr in snapshot.layers:
        name_b = name.encode("utf-8")
        a = np.ascontiguousarray(arr, dtype="<f4")
        out += struct.pack("<I", len(name_b))
        out += name_b
        out += struct.pack("<I", a.ndim)
        out += struct.pack(f"<{a.ndim}I", *a.shape) if a.ndim else b""
        out += a.tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)) & 0xFFFFFFFF)
    return bytes(out)


class _Cursor:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise ProtocolError(E_TRUNCATED, "weight blob ends mid-field")
        piece = self.data[self.pos : self.pos + n]
        self.pos += n
        return piece

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def read_weights(blob: bytes) -> WeightSnapshot:
    if len(blob) < 4 + 12 + 4:
        raise ProtocolError(E_TRUNCATED, "weight blob too short")
    body, (crc_stored,) = blob[:-4], struct.unpack("<I", blob[-4:])
    if zlib.crc32(body) & 0xFFFFFFFF != crc_stored:
        raise ProtocolError(E_CRC_MISMATCH, "stored checksum does not match contents")
    cur = _Cursor(body)
    if cur.take(4) != WEIGHT_MAGIC:
        raise ProtocolError(E_BAD_MAGIC, "not a weight blob")
    fmt = cur.u32()
    if fmt != WEIGHT_FORMAT_VERSION:
        raise ProtocolError(E_MALFORMED, f"unsupported format version {fmt}")
    model_version = cur.u32()
    layer_count = cur.u32()
    layers: List[Tuple[str, np.ndarray]] = []
    for _ in range(layer_count):
        name = cur.take(cur.u32()).decode("utf-8")
        rank = cur.u32()
        if rank > 8:
            raise ProtocolError(E_MALFORMED, f"layer {name!r} rank {rank} is implausible")
        dims = tuple(cur.u32() for _ in range(rank))
        count = 1
        for d in dims:
            count *= d
        raw = cur.take(4 * count)
        arr = np.frombuffer(raw, dtype="<f4").astype(np.float64).reshape(dims)
        layers.append((name, arr))
    if cur.pos != len(body):
        raise ProtocolError(E_SHAPE_MISMATCH, "float data does not match declared dims")
    return WeightSnapshot(model_version, tuple(layers))


def weights_push_message(snapshot: WeightSnapshot) -> dict:
    blob = write_weights(snapshot)
    if len(blob) > MAX_FRAME_BYTES // 2:
        raise ProtocolError(E_OVERSIZE, "weight blob exceeds frame budget")
    return make_message(
        "WEIGHTS_PUSH",
        model_version=snapshot.model_version,
        blob=base64.b64encode(blob).decode("ascii"),
    )


def weights_from_message(msg: dict) -> WeightSnapshot:
    if msg.get("type") != "WEIGHTS_PUSH":
        raise ProtocolError(E_MALFORMED, "not a WEIGHTS_PUSH message")
    try:
        blob = base64.b64decode(msg["blob"], validate=True)
    except (ValueError, KeyError) as exc:
        raise ProtocolError(E_MALFORMED, f"bad blob encoding: {exc}") from exc
    snap = read_weights(blob)
    if snap.model_version != msg["model_version"]:
        raise ProtocolError(E_MALFORMED, "header/blob version disagreement")
    return snap


# --- episode records --------------------------------------------------------


def _frame_to_obj(f: Frame) -> dict:
    return {
        "t_ns": f.t_ns,
        "gripper_width": f.gripper_width,
        "feature_count": f.feature_count,
        "pose": f.pose.to_json_obj() if f.pose is not None else None,
        "obs": [float(x) for x in f.obs] if f.obs is not None else None,
        "action": [float(x) for x in f.action] if f.action is not None else None,
        "tags": sorted(f.tags),
        "valid": f.valid,
    }


def _frame_from_obj(obj: dict) -> Frame:
    return Frame(
        t_ns=int(obj["t_ns"]),
        gripper_width=float(obj["gripper_width"]),
        feature_count=int(obj["feature_count"]),
        pose=Pose.from_json_obj(obj["pose"]) if obj.get("pose") is not None else None,
        obs=np.array(obj["obs"], dtype=float) if obj.get("obs") is not None else None,
        action=np.array(obj["action"], dtype=float) if obj.get("action") is not None else None,
        tags=set(obj.get("tags", ())),
        valid=bool(obj.get("valid", True)),
    )


def episode_header_obj(ep: Episode) -> dict:
    return {
        "episode_id": ep.episode_id,
        "task": ep.task,
        "device_id": ep.device_id,
        "rate_hz": ep.rate_hz,
        "t0_ns": ep.t0_ns,
        "kind": ep.kind,
        "layout_id": ep.layout_id,
    }


class EpisodeWriter:
    """Streaming writer: header first, then one line per frame."""

    def __init__(self, sink: IO[str], header: dict):
        for key in ("episode_id", "task", "device_id", "rate_hz", "t0_ns", "kind", "layout_id"):
            if key not in header:
                raise ProtocolError(E_MALFORMED, f"episode header missing {key!r}")
        self._sink = sink
        self._last_t: Optional[int] = None
        sink.write(_dump(header).decode("utf-8") + "\n")

    def write_frame(self, frame: Frame) -> None:
        if self._last_t is not None and frame.t_ns <= self._last_t:
            raise ProtocolError(E_MALFORMED, "frame timestamps must strictly increase")
        self._last_t = frame.t_ns
        self._sink.write(_dump(_frame_to_obj(frame)).decode("utf-8") + "\n")

    def flush(self) -> None:
        self._sink.flush()


def write_episode(ep: Episode, sink: IO[str]) -> None:
    writer = EpisodeWriter(sink, episode_header_obj(ep))
    for f in ep.frames:
        writer.write_frame(f)
    writer.flush()


def read_episode(source: IO[str]) -> Episode:
    header_line = source.readline()
    if not header_line.strip():
        raise ProtocolError(E_MALFORMED, "missing episode header line")
    try:
        header = json.loads(header_line)
    except json.JSONDecodeError as exc:
        raise ProtocolError(E_MALFORMED, f"bad header: {exc}") from exc
    if not isinstance(header, dict) or "episode_id" not in header:
        raise ProtocolError(E_MALFORMED, "header is not an episode object")
    frames: List[Frame] = []
    last_t = None
    for lineno, line in enumerate(source, start=2):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
            frame = _frame_from_obj(obj)
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise ProtocolError(E_MALFORMED, f"line {lineno}: {exc}") from exc
        if last_t is not None and frame.t_ns <= last_t:
            raise ProtocolError(
                E_MALFORMED, f"line {lineno}: timestamp {frame.t_ns} does not increase"
            )
        last_t = frame.t_ns
        frames.append(frame)
    if not frames:
        raise ProtocolError(E_EMPTY_EPISODE, "no frame lines after header")
    return Episode(
        episode_id=str(header["episode_id"]),
        task=str(header["task"]),
        device_id=str(header["device_id"]),
        rate_hz=float(header["rate_hz"]),
        t0_ns=int(header["t0_ns"]),
        kind=str(header["kind"]),
        layout_id=int(header["layout_id"]),
        frames=frames,
    )


def episode_put_message(ep: Episode) -> dict:
    obj = episode_header_obj(ep)
    obj["frames"] = [_frame_to_obj(f) for f in ep.frames]
    return make_message("EPISODE_PUT", episode=obj)


def episode_from_message(msg: dict) -> Episode:
    if msg.get("type") != "EPISODE_PUT":
        raise ProtocolError(E_MALFORMED, "not an EPISODE_PUT message")
    obj = msg["episode"]
    try:
        frames = [_frame_from_obj(o) for o in obj["frames"]]
        return Episode(
            episode_id=str(obj["episode_id"]),
            task=str(obj["task"]),
            device_id=str(obj["device_id"]),
            rate_hz=float(obj["rate_hz"]),
            t0_ns=int(obj["t0_ns"]),
            kind=str(obj["kind"]),
            layout_id=int(obj["layout_id"]),
            frames=frames,
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise ProtocolError(E_MALFORMED, f"bad episode object: {exc}") from exc
