"""Data-serving store: validated episode ingest, offline/online partitions,
and weighted batch sampling for the trainer.

Episodes arrive tagged by kind: demonstrations land in the offline
partition, operator corrections in the online partition, and plain rollouts
are retained for inspection but never sampled. Sampling is frame-level and
uniform with replacement within each partition.
"""

import math
import os
import threading
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

import numpy as np

from .protocol import ProtocolError, read_episode, write_episode
from .trajvalidate import Episode, ValidationReport, ValidatorConfig, validate_episode

DEFAULT_CHUNK_LEN = 16

_PARTITION_BY_KIND = {"demo": "offline", "correction": "online", "rollout": "rollout"}


@dataclass(frozen=True)
class IngestResult:
    accepted: bool
    episode_id: str
    report: ValidationReport


@dataclass(frozen=True)
class SampleBatch:
    items: List[Tuple[np.ndarray, np.ndarray]]
    composition: Tuple[int, int]  # (n_offline, n_online)


@dataclass(frozen=True)
class LoadSummary:
    loaded: int
    skipped: List[Tuple[str, str]]  # (path, reason)


class _Partition:
    def __init__(self):
        self.episodes: Dict[str, Episode] = {}
        self.frame_total = 0
        # one entry per usable transition: (episode_id, row into the
        # episode's obs/action matrices)
        self.transitions: List[Tuple[str, int]] = []
        self.obs: Dict[str, List[np.ndarray]] = {}
        self.actions: Dict[str, np.ndarray] = {}

    def add(self, ep: Episode) -> None:
        usable = [f for f in ep.frames if f.obs is not None and f.action is not None]
        self.episodes[ep.episode_id] = ep
        self.frame_total += len(ep.frames)
        self.obs[ep.episode_id] = [np.asarray(f.obs, dtype=float) for f in usable]
        if usable:
            self.actions[ep.episode_id] = np.stack(
                [np.asarray(f.action, dtype=float) for f in usable]
            )
        self.transitions.extend((ep.episode_id, k) for k in range(len(usable)))


class DataStore:
    """In-memory store with optional per-episode file persistence."""

    def __init__(
        self,
        root_dir: Optional[str] = None,
        validator: Optional[ValidatorConfig] = None,
        chunk_len: int = DEFAULT_CHUNK_LEN,
    ):
        if chunk_len < 1:
            raise ValueError("chunk_len must be >= 1")
        self.root_dir = root_dir
        self.validator = validator if validator is not None else ValidatorConfig()
        self.chunk_len = chunk_len
        self._lock = threading.Lock()
        self._parts = {"offline": _Partition(), "online": _Partition(), "rollout": _Partition()}
        if root_dir:
            for sub in self._parts:
                os.makedirs(os.path.join(root_dir, sub), exist_ok=True)

    def _persist(self, ep: Episode, partition: str) -> None:
        if not self.root_dir:
            return
        path = os.path.join(self.root_dir, partition, f"{ep.episode_id}.jsonl")
        tmp = path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as sink:
            write_episode(ep, sink)
        os.replace(tmp, path)

    def ingest_episode(self, ep: Episode) -> IngestResult:
        """Validate and, when accepted, index and persist one episode.

        The episode is visible to sample_batch/stats before this returns.
        """
        report = validate_episode(ep, self.validator)
        with self._lock:
            for part in self._parts.values():
                if ep.episode_id in part.episodes:
                    raise ValueError(f"duplicate episode_id {ep.episode_id!r}")
            if report.verdict != "accept":
                return IngestResult(False, ep.episode_id, report)
            partition = _PARTITION_BY_KIND[ep.kind]
            self._parts[partition].add(ep)
            self._persist(ep, partition)
        return IngestResult(True, ep.episode_id, report)

    def _draw(self, partition: _Partition, count: int, rng: np.random.Generator):
        picks = rng.integers(0, len(partition.transitions), size=count)
        items = []
        for p in picks:
            ep_id, k = partition.transitions[int(p)]
            actions = partition.actions[ep_id]
            chunk = actions[k : k + self.chunk_len]
            if chunk.shape[0] < self.chunk_len:
                pad = np.repeat(actions[-1:], self.chunk_len - chunk.shape[0], axis=0)
                chunk = np.concatenate([chunk, pad], axis=0)
            items.append((partition.obs[ep_id][k], chunk))
        return items

    def sample_batch(
        self, n: int, offline_fraction: float = 0.5, rng_seed: int = 0
    ) -> SampleBatch:
        """Draw n transitions split between the partitions.

        The offline share is ceil(n * fraction) whenever online data exists;
        with an empty online partition every draw is offline.
        """
        if n < 1:
            raise ValueError("batch size must be >= 1")
        if not 0.0 <= offline_fraction <= 1.0:
            raise ValueError("offline_fraction must be in [0, 1]")
        with self._lock:
            offline = self._parts["offline"]
            online = self._parts["online"]
            if not offline.transitions and not online.transitions:
                raise ValueError("no sampleable data in either partition")
            if not offline.transitions:
                raise ValueError("offline partition is empty")
            rng = np.random.default_rng(rng_seed)
            if online.transitions:
                n_off = math.ceil(n * offline_fraction)
                n_on = n - n_off
            else:
                n_off, n_on = n, 0
            items = self._draw(offline, n_off, rng)
            if n_on:
                items.extend(self._draw(online, n_on, rng))
        return SampleBatch(items=items, composition=(n_off, n_on))

    def stats(self) -> dict:
        with self._lock:
            return {
                "offline_episodes": len(self._parts["offline"].episodes),
                "online_episodes": len(self._parts["online"].episodes),
                "offline_frames": self._parts["offline"].frame_total,
                "online_frames": self._parts["online"].frame_total,
            }

    @staticmethod
    def load(
        root_dir: str,
        validator: Optional[ValidatorConfig] = None,
        chunk_len: int = DEFAULT_CHUNK_LEN,
    ) -> Tuple["DataStore", LoadSummary]:
        """Rebuild a store from its persistence directory.

        Episodes were validated at original ingest, so files reload without
        re-running the verdict gate; unreadable files are skipped and named
        in the summary.
        """
        store = DataStore(root_dir=None, validator=validator, chunk_len=chunk_len)
        store.root_dir = root_dir
        loaded = 0
        skipped: List[Tuple[str, str]] = []
        for sub in ("offline", "online", "rollout"):
            subdir = os.path.join(root_dir, sub)
            os.makedirs(subdir, exist_ok=True)
            for name in sorted(os.listdir(subdir)):
                if not name.endswith(".jsonl"):
                    continue
                path = os.path.join(subdir, name)
                try:
                    with open(path, "r", encoding="utf-8") as source:
                        ep = read_episode(source)
                except (ProtocolError, OSError, ValueError) as exc:
                    skipped.append((path, str(exc)))
                    continue
                with store._lock:
                    store._parts[sub].add(ep)
                loaded += 1
        return store, LoadSummary(loaded=loaded, skipped=skipped)
