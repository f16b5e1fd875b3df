"""Shared-control collection sessions over the block-sorting world.

The policy drives in planning cycles: one inference, then a fixed number
of executed ticks. A scripted expert shadows every plan; when the plan
drifts past a threshold the operator snapshots the state, unrolls the
expert in a side simulation, and uploads that unroll as a correction
episode. The live episode always continues from the intervention state
under policy control, so the inference cadence never skips a beat.
"""

from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from .fieldsim import (
    FieldEnv,
    WorldState,
    generate_layout,
    observation,
    oracle_chunk,
    score_episode,
    step as sim_step,
    ScoreReport,
)
from .inference import InferenceCore, InferenceError
from .trajvalidate import Episode, Frame

MODE_OFFLINE = "offline_pi"
MODE_INSTANT = "instant_pi"

SIM_TASK = "fieldsim.sort"
SIM_RATE_HZ = 10.0
SIM_DT_NS = 100_000_000
SIM_T0_NS = 1_700_000_000 * 1_000_000_000
SIM_FEATURE_COUNT = 200

UploadFn = Optional[Callable[[Episode], object]]


@dataclass(frozen=True)
class OperatorConfig:
    mode: str = MODE_INSTANT
    tau: float = 0.02
    budget: int = 12
    t_pred: int = 16
    t_exec: int = 8
    correction_length: int = 16  # defaults to the planning horizon
    n_episodes: int = 4
    layout_seed: int = 0
    noise_seed: int = 0
    region: str = "train"
    # planning cycles to sit out after an intervention: the correction
    # already covers the next correction_length states, so immediately
    # re-triggering there only duplicates data
    cooldown_cycles: int = 2
    # deployment scenes in the session; 0 gives every episode its own
    # layout, k > 0 cycles episodes through k layouts so scenes are
    # reattempted as the session goes on
    distinct_layouts: int = 0

    def __post_init__(self):
        if self.mode not in (MODE_OFFLINE, MODE_INSTANT):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.budget < 0:
            raise ValueError("budget must be nonnegative")
        if not (1 <= self.t_exec <= self.t_pred):
            raise ValueError("need 1 <= t_exec <= t_pred")
        if self.correction_length < 1:
            raise ValueError("correction_length must be positive")
        if self.cooldown_cycles < 0:
            raise ValueError("cooldown_cycles must be nonnegative")
        if self.distinct_layouts < 0:
            raise ValueError("distinct_layouts must be nonnegative")


class LocalSession:
    """In-process stand-in for a wire inference client."""

    def __init__(self, core: InferenceCore, session_id: str = "operator"):
        self._core = core
        self._session_id = session_id
        try:
            core.start_session(session_id, role="operator")
        except InferenceError:
            pass  # session ids survive reconnects

    def infer(self, obs) -> Tuple[np.ndarray, int, int]:
        return self._core.infer(self._session_id, obs)


def _sim_frames(pairs: Sequence[Tuple[np.ndarray, np.ndarray]]) -> List[Frame]:
    return [
        Frame(
            t_ns=SIM_T0_NS + k * SIM_DT_NS,
            gripper_width=0.0,
            feature_count=SIM_FEATURE_COUNT,
            pose=None,
            obs=np.asarray(obs, dtype=float),
            action=np.asarray(action, dtype=float),
        )
        for k, (obs, action) in enumerate(pairs)
    ]


def build_sim_episode(episode_id: str, kind: str, layout_id: int, pairs) -> Episode:
    return Episode(
        episode_id=episode_id,
        task=SIM_TASK,
        device_id="sim0",
        rate_hz=SIM_RATE_HZ,
        t0_ns=SIM_T0_NS,
        kind=kind,
        layout_id=layout_id,
        frames=_sim_frames(pairs),
    )


def make_demo_episode(layout, noise_seed: int, episode_id: str) -> Episode:
    """Full expert rollout packaged as an offline demonstration."""
    env = FieldEnv(layout, noise_seed)
    env.reset()
    pairs = []
    while not env.done:
        obs = observation(env.state)
        action = oracle_chunk(env.state, 1)[0]
        pairs.append((obs, action))
        env.step(action)
    return build_sim_episode(episode_id, "demo", layout.layout_id, pairs)


def detect_weakness(chunk, reference, tau: float) -> Tuple[float, bool]:
    """Mean planar distance between two plans; triggers strictly above tau.

    Only the translation columns are compared, so grip-channel noise
    never fires an intervention on its own.
    """
    chunk = np.asarray(chunk, dtype=float)
    reference = np.asarray(reference, dtype=float)
    if chunk.shape != reference.shape:
        raise ValueError(f"plan shapes differ: {chunk.shape} vs {reference.shape}")
    if chunk.ndim != 2 or chunk.shape[1] < 2:
        raise ValueError("plans must be (steps, action_dim >= 2) arrays")
    deviation = float(np.mean(np.linalg.norm(chunk[:, :2] - reference[:, :2], axis=1)))
    return deviation, deviation > tau


@dataclass(frozen=True)
class InterventionEvent:
    episode_index: int
    tick: int
    deviation: float
    episode_id: str
    obs: np.ndarray  # state snapshot the policy was inferring from


@dataclass(frozen=True)
class FollowResult:
    executed: int
    version: int
    obs: np.ndarray
    chunk: np.ndarray


def follow_foresight(session, env: FieldEnv, t_exec: int, recorder=None, on_plan=None) -> FollowResult:
    """One planning cycle: a single inference, then at most t_exec ticks.

    on_plan runs between the inference and the first executed tick, while
    the environment still sits in the state the plan was made from.
    """
    if env.done:
        raise ValueError("episode already finished")
    obs = observation(env.state)
    chunk, version, _ = session.infer(obs)
    if on_plan is not None:
        on_plan(obs, chunk, version)
    executed = 0
    for k in range(t_exec):
        if env.done:
            break
        if recorder is not None:
            recorder.append((observation(env.state), np.asarray(chunk[k], dtype=float)))
        env.step(chunk[k])
        executed += 1
    return FollowResult(executed=executed, version=version, obs=obs, chunk=chunk)


def intervene_and_correct(
    state: WorldState, length: int, episode_id: str, upload: UploadFn = None
) -> Episode:
    """Unroll the expert from a copy of `state` and package the result.

    The live state is never advanced: the correction happens in a side
    simulation, so its first frame is exactly the policy-visited state.
    """
    if state.done:
        raise ValueError("cannot correct from a finished episode")
    sim = state.copy()
    pairs = []
    for _ in range(length):
        if sim.done:
            break
        obs = observation(sim)
        action = oracle_chunk(sim, 1)[0]
        pairs.append((obs, action))
        sim_step(sim, action)
    ep = build_sim_episode(episode_id, "correction", state.layout.layout_id, pairs)
    if upload is not None:
        upload(ep)
    return ep


@dataclass
class EpisodeRecord:
    episode_index: int
    layout_id: int
    infer_ticks: List[int] = field(default_factory=list)
    versions: List[int] = field(default_factory=list)
    deviations: List[float] = field(default_factory=list)
    executed_ticks: int = 0
    rollout_id: str = ""
    score: Optional[ScoreReport] = None


@dataclass
class SessionLog:
    mode: str
    tau: float
    budget: int
    episodes: List[EpisodeRecord] = field(default_factory=list)
    interventions: List[InterventionEvent] = field(default_factory=list)

    @property
    def corrections_used(self) -> int:
        return len(self.interventions)

    def mean_score(self) -> float:
        if not self.episodes:
            raise ValueError("no episodes recorded")
        return float(np.mean([rec.score.normalized for rec in self.episodes]))


def run_collection_session(
    cfg: OperatorConfig,
    session,
    upload: UploadFn = None,
    on_correction: Optional[Callable[[int], None]] = None,
    session_name: str = "session",
) -> SessionLog:
    """Drive cfg.n_episodes episodes, correcting at most cfg.budget times.

    In instant mode on_correction runs right after each upload (this is
    where a trainer hook advances and republishes weights); the very next
    planning cycle then infers against whatever weights are live. Offline
    mode collects the same way but never touches the trainer, so the
    serving version stays frozen for the whole session.
    """
    log = SessionLog(mode=cfg.mode, tau=cfg.tau, budget=cfg.budget)
    cycle = cfg.distinct_layouts or cfg.n_episodes
    for idx in range(cfg.n_episodes):
        layout = generate_layout(cfg.layout_seed + idx % cycle, region=cfg.region)
        env = FieldEnv(layout, noise_seed=cfg.noise_seed + idx)
        env.reset()
        rec = EpisodeRecord(episode_index=idx, layout_id=layout.layout_id)
        recorder: list = []
        cooldown = [0]

        def on_plan(obs, chunk, version, _env=env, _rec=rec, _idx=idx, _cool=cooldown):
            _rec.infer_ticks.append(_env.state.tick)
            _rec.versions.append(version)
            reference = oracle_chunk(_env.state, cfg.t_pred)
            deviation, triggered = detect_weakness(chunk, reference, cfg.tau)
            _rec.deviations.append(deviation)
            if _cool[0] > 0:
                _cool[0] -= 1
                return
            if triggered and log.corrections_used < cfg.budget:
                correction_id = f"{session_name}-c{log.corrections_used}"
                intervene_and_correct(_env.state, cfg.correction_length, correction_id, upload)
                log.interventions.append(
                    InterventionEvent(
                        episode_index=_idx,
                        tick=_env.state.tick,
                        deviation=deviation,
                        episode_id=correction_id,
                        obs=np.asarray(obs, dtype=float).copy(),
                    )
                )
                _cool[0] = cfg.cooldown_cycles
                if cfg.mode == MODE_INSTANT and on_correction is not None:
                    on_correction(log.corrections_used)

        while not env.done:
            result = follow_foresight(session, env, cfg.t_exec, recorder=recorder, on_plan=on_plan)
            rec.executed_ticks += result.executed

        rec.rollout_id = f"{session_name}-r{idx}"
        if upload is not None:
            upload(build_sim_episode(rec.rollout_id, "rollout", layout.layout_id, recorder))
        rec.score = score_episode(env.state.events)
        log.episodes.append(rec)
    return log
