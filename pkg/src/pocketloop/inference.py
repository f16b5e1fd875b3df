"""Inference serving core: sessions, atomic snapshot hot-swap, and latency
accounting.

Each request is pinned to whatever snapshot is current when it starts, so
a concurrent install never produces a torn (mixed-version) prediction, and
installs never wait on in-flight compute.
"""

import threading
import time
from collections import deque
from typing import Dict, Optional, Tuple

import numpy as np

from .policy import PolicyArch, PolicySnapshot, predict_chunk

E_UNKNOWN_SESSION = "UNKNOWN_SESSION"
E_DUPLICATE_SESSION = "DUPLICATE_SESSION"
E_NO_MODEL = "NO_MODEL"
E_STALE_VERSION = "STALE_VERSION"
E_DIM_MISMATCH = "DIM_MISMATCH"

STATS_WINDOW = 4096


class InferenceError(Exception):
    def __init__(self, code: str, detail: str = ""):
        super().__init__(f"{code}: {detail}" if detail else code)
        self.code = code
        self.detail = detail


class _Session:
    __slots__ = ("session_id", "role", "created_at_ns", "request_count")

    def __init__(self, session_id: str, role: str):
        self.session_id = session_id
        self.role = role
        self.created_at_ns = time.time_ns()
        self.request_count = 0


class InferenceCore:
    def __init__(
        self,
        arch: PolicyArch,
        initial: Optional[PolicySnapshot] = None,
        predict_delay_s: float = 0.0,
    ):
        self.arch = arch
        # artificial compute delay, used only by scheduling tests
        self.predict_delay_s = predict_delay_s
        self._swap_lock = threading.Lock()
        self._current: Optional[PolicySnapshot] = initial
        self._history: list = [] if initial is None else [(initial.version, time.time_ns())]
        self._session_lock = threading.Lock()
        self._sessions: Dict[str, _Session] = {}
        self._stats_lock = threading.Lock()
        self._request_count = 0
        self._compute_micros = deque(maxlen=STATS_WINDOW)
        self._version_counts: Dict[int, int] = {}

    # -- sessions --

    def start_session(self, session_id: str, role: str = "client") -> str:
        if not session_id:
            raise InferenceError(E_DUPLICATE_SESSION, "session_id must be nonempty")
        with self._session_lock:
            if session_id in self._sessions:
                raise InferenceError(E_DUPLICATE_SESSION, session_id)
            self._sessions[session_id] = _Session(session_id, role)
        return session_id

    def close_session(self, session_id: str) -> None:
        with self._session_lock:
            if session_id not in self._sessions:
                raise InferenceError(E_UNKNOWN_SESSION, session_id)
            del self._sessions[session_id]

    def session_request_count(self, session_id: str) -> int:
        with self._session_lock:
            if session_id not in self._sessions:
                raise InferenceError(E_UNKNOWN_SESSION, session_id)
            return self._sessions[session_id].request_count

    # -- serving --

    def infer(self, session_id: str, obs: np.ndarray) -> Tuple[np.ndarray, int, int]:
        """Returns (chunk, model_version, server_compute_micros)."""
        with self._session_lock:
            session = self._sessions.get(session_id)
            if session is None:
                raise InferenceError(E_UNKNOWN_SESSION, session_id)
            session.request_count += 1
        obs = np.asarray(obs, dtype=float)
        if obs.shape != (self.arch.obs_dim,):
            raise InferenceError(
                E_DIM_MISMATCH, f"obs shape {obs.shape}, arch wants ({self.arch.obs_dim},)"
            )
        with self._swap_lock:
            snapshot = self._current
        if snapshot is None:
            raise InferenceError(E_NO_MODEL, "no snapshot installed")
        start = time.perf_counter_ns()
        if self.predict_delay_s:
            time.sleep(self.predict_delay_s)
        chunk = predict_chunk(snapshot, obs)
        micros = (time.perf_counter_ns() - start) // 1000
        with self._stats_lock:
            self._request_count += 1
            self._compute_micros.append(micros)
            self._version_counts[snapshot.version] = (
                self._version_counts.get(snapshot.version, 0) + 1
            )
        return chunk, snapshot.version, int(micros)

    # -- weights --

    def install(self, snapshot: PolicySnapshot) -> int:
        """Atomically swap in a newer snapshot; stale versions are refused."""
        if snapshot.arch.layer_shapes() != self.arch.layer_shapes():
            raise InferenceError(E_DIM_MISMATCH, "snapshot does not fit the bound arch")
        with self._swap_lock:
            if self._current is not None and snapshot.version <= self._current.version:
                raise InferenceError(
                    E_STALE_VERSION,
                    f"have v{self._current.version}, refused v{snapshot.version}",
                )
            self._current = snapshot
            self._history.append((snapshot.version, time.time_ns()))
        return snapshot.version

    def current_version(self) -> Optional[int]:
        with self._swap_lock:
            return None if self._current is None else self._current.version

    def swap_history(self):
        with self._swap_lock:
            return list(self._history)

    # -- stats --

    def stats(self) -> dict:
        with self._stats_lock:
            window = list(self._compute_micros)
            versions = dict(self._version_counts)
            count = self._request_count
        with self._session_lock:
            live = len(self._sessions)
        p50 = float(np.percentile(window, 50)) if window else 0.0
        p99 = float(np.percentile(window, 99)) if window else 0.0
        return {
            "requests": count,
            "live_sessions": live,
            "p50_micros": p50,
            "p99_micros": p99,
            "version_counts": {str(v): c for v, c in sorted(versions.items())},
            "current_version": self.current_version(),
        }
