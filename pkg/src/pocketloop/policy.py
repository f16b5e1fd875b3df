"""Chunked-action policy: a small tanh regression network that maps one
observation to a T_pred-step action chunk, trained by plain gradient
descent on normalized actions.

Everything is float64 numpy with a fixed evaluation order, so identical
(seed, data, config) reproduce identical weight trajectories bit for bit.
Published snapshots are quantized to the 32-bit wire precision.
"""

import math
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .datanode import SampleBatch
from .protocol import WeightSnapshot

DEFAULT_ACTION_SCALE = (0.05, 0.05, 1.0)


@dataclass(frozen=True)
class PolicyArch:
    obs_dim: int = 22
    hidden: Tuple[int, ...] = (64, 64)
    t_obs: int = 1
    t_pred: int = 16
    t_exec: int = 8
    action_dim: int = 3
    action_scale: Tuple[float, ...] = DEFAULT_ACTION_SCALE

    def __post_init__(self):
        if self.t_obs != 1:
            raise ValueError("only single-observation conditioning is supported")
        if not 1 <= self.t_exec <= self.t_pred:
            raise ValueError("t_exec must lie in [1, t_pred]")
        if self.obs_dim < 1 or self.action_dim < 1 or any(h < 1 for h in self.hidden):
            raise ValueError("layer sizes must be positive")
        if len(self.action_scale) != self.action_dim:
            raise ValueError("action_scale length must equal action_dim")
        if any(s <= 0 for s in self.action_scale):
            raise ValueError("action_scale entries must be positive")

    @property
    def out_dim(self) -> int:
        return self.t_pred * self.action_dim

    def layer_shapes(self) -> List[Tuple[str, Tuple[int, ...]]]:
        sizes = (self.obs_dim,) + tuple(self.hidden) + (self.out_dim,)
        shapes: List[Tuple[str, Tuple[int, ...]]] = []
        for i in range(len(sizes) - 1):
            shapes.append((f"w{i}", (sizes[i], sizes[i + 1])))
            shapes.append((f"b{i}", (sizes[i + 1],)))
        return shapes

    def scale_vector(self) -> np.ndarray:
        return np.asarray(self.action_scale, dtype=float)


@dataclass(frozen=True)
class PolicySnapshot:
    version: int
    arch: PolicyArch
    weights: Dict[str, np.ndarray]

    def __post_init__(self):
        for name, arr in self.weights.items():
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"layer {name!r} has non-finite values")

    def to_wire(self) -> WeightSnapshot:
        layers = [(name, self.weights[name]) for name, _ in self.arch.layer_shapes()]
        return WeightSnapshot.quantized(self.version, layers)

    @staticmethod
    def from_wire(arch: PolicyArch, ws: WeightSnapshot) -> "PolicySnapshot":
        expected = arch.layer_shapes()
        got = [(name, arr.shape) for name, arr in ws.layers]
        if got != [(name, shape) for name, shape in expected]:
            raise ValueError(f"snapshot layers {got} do not match arch {expected}")
        return PolicySnapshot(ws.model_version, arch, {n: a for n, a in ws.layers})


def init_weights(arch: PolicyArch, seed: int) -> Dict[str, np.ndarray]:
    """Uniform +-1/sqrt(fan_in) weights, zero biases, in fixed layer order."""
    rng = np.random.default_rng(seed)
    weights: Dict[str, np.ndarray] = {}
    for name, shape in arch.layer_shapes():
        if name.startswith("w"):
            bound = 1.0 / math.sqrt(shape[0])
            weights[name] = rng.uniform(-bound, bound, size=shape)
        else:
            weights[name] = np.zeros(shape)
    return weights


def init_policy(arch: PolicyArch, seed: int) -> PolicySnapshot:
    return PolicySnapshot(version=0, arch=arch, weights=init_weights(arch, seed))


def _forward(
    weights: Dict[str, np.ndarray], arch: PolicyArch, obs: np.ndarray
) -> Tuple[np.ndarray, List[np.ndarray]]:
    """Batched forward pass; returns raw output and hidden activations."""
    h = obs
    hiddens: List[np.ndarray] = []
    n_layers = len(arch.hidden) + 1
    for i in range(n_layers):
        z = h @ weights[f"w{i}"] + weights[f"b{i}"]
        if i < n_layers - 1:
            h = np.tanh(z)
            hiddens.append(h)
        else:
            h = z
    return h, hiddens


def predict_chunk(snapshot: PolicySnapshot, obs: np.ndarray) -> np.ndarray:
    """Deterministic chunk prediction, clamped to the action bounds."""
    obs = np.asarray(obs, dtype=float)
    if obs.shape != (snapshot.arch.obs_dim,):
        raise ValueError(f"obs has shape {obs.shape}, expected ({snapshot.arch.obs_dim},)")
    raw, _ = _forward(snapshot.weights, snapshot.arch, obs[None, :])
    scale = snapshot.arch.scale_vector()
    chunk = raw[0].reshape(snapshot.arch.t_pred, snapshot.arch.action_dim) * scale
    return np.clip(chunk, -scale, scale)


def compute_loss_and_grads(
    arch: PolicyArch,
    weights: Dict[str, np.ndarray],
    obs: np.ndarray,
    target_norm: np.ndarray,
) -> Tuple[float, Dict[str, np.ndarray]]:
    """MSE loss in normalized action units and its analytic gradients."""
    batch, out_dim = target_norm.shape
    raw, hiddens = _forward(weights, arch, obs)
    diff = raw - target_norm
    loss = float(np.mean(diff * diff))
    grads: Dict[str, np.ndarray] = {}
    delta = 2.0 * diff / (batch * out_dim)
    n_layers = len(arch.hidden) + 1
    for i in range(n_layers - 1, -1, -1):
        upstream = hiddens[i - 1] if i > 0 else obs
        grads[f"w{i}"] = upstream.T @ delta
        grads[f"b{i}"] = delta.sum(axis=0)
        if i > 0:
            delta = (delta @ weights[f"w{i}"].T) * (1.0 - hiddens[i - 1] ** 2)
    return loss, grads


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 1e-4
    sync_interval: int = 100
    offline_fraction: float = 0.5
    momentum: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1 or self.learning_rate <= 0 or self.sync_interval < 1:
            raise ValueError("batch_size, learning_rate, sync_interval must be positive")
        if not 0.0 <= self.offline_fraction <= 1.0:
            raise ValueError("offline_fraction must be in [0, 1]")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")


@dataclass
class TrainState:
    arch: PolicyArch
    cfg: TrainConfig
    weights: Dict[str, np.ndarray]
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)
    version: int = 0
    steps_done: int = 0

    @staticmethod
    def from_snapshot(snapshot: PolicySnapshot, cfg: TrainConfig) -> "TrainState":
        # optimizer state starts cold on purpose: resuming finetuning does
        # not inherit momentum from whatever produced the snapshot
        return TrainState(
            arch=snapshot.arch,
            cfg=cfg,
            weights={k: v.copy() for k, v in snapshot.weights.items()},
            velocity={k: np.zeros_like(v) for k, v in snapshot.weights.items()},
            version=snapshot.version,
        )

    def snapshot(self) -> PolicySnapshot:
        quant = {
            k: v.astype(np.float32).astype(np.float64) for k, v in self.weights.items()
        }
        return PolicySnapshot(version=self.version, arch=self.arch, weights=quant)


def normalize_targets(arch: PolicyArch, targets: np.ndarray) -> np.ndarray:
    """(B, t_pred, action_dim) raw actions -> (B, out_dim) normalized."""
    scaled = np.asarray(targets, dtype=float) / arch.scale_vector()
    return scaled.reshape(scaled.shape[0], arch.out_dim)


def train_step(state: TrainState, batch: SampleBatch) -> float:
    """One gradient-descent update; returns the pre-update loss."""
    if len(batch.items) != state.cfg.batch_size:
        raise ValueError(
            f"batch has {len(batch.items)} items, config says {state.cfg.batch_size}"
        )
    obs = np.stack([np.asarray(o, dtype=float) for o, _ in batch.items])
    targets = np.stack([np.asarray(t, dtype=float) for _, t in batch.items])
    target_norm = normalize_targets(state.arch, targets)
    with np.errstate(over="ignore", invalid="ignore"):
        loss, grads = compute_loss_and_grads(state.arch, state.weights, obs, target_norm)
    if not np.isfinite(loss):
        raise FloatingPointError(f"non-finite training loss {loss}")
    lr, mom = state.cfg.learning_rate, state.cfg.momentum
    for name in state.weights:
        if mom:
            state.velocity[name] = mom * state.velocity[name] - lr * grads[name]
            state.weights[name] = state.weights[name] + state.velocity[name]
        else:
            state.weights[name] = state.weights[name] - lr * grads[name]
    state.steps_done += 1
    return loss


def batch_seed(base_seed: int, step: int) -> int:
    # stable per-step derivation so reruns draw identical batches
    return (base_seed * 1_000_003 + step) % (2**63)


def run_online_finetune(
    store_client,
    state: TrainState,
    steps: int,
    publish: Optional[Callable[[PolicySnapshot], None]] = None,
) -> TrainState:
    """Sample/update loop with periodic snapshot publication.

    Publishes after every sync_interval steps, bumping the version by one
    each time. The store client is consulted fresh every step, so data
    ingested mid-run joins the draw pool immediately.
    """
    if steps < 0:
        raise ValueError("steps must be nonnegative")
    cfg = state.cfg
    for _ in range(steps):
        step_index = state.steps_done + 1
        batch = store_client.sample_batch(
            cfg.batch_size, cfg.offline_fraction, rng_seed=batch_seed(cfg.seed, step_index)
        )
        train_step(state, batch)
        if state.steps_done % cfg.sync_interval == 0:
            state.version += 1
            if publish is not None:
                publish(state.snapshot())
    return state


def evaluate_policy_loss(
    snapshot: PolicySnapshot, heldout: Sequence[Tuple[np.ndarray, np.ndarray]]
) -> float:
    """Mean normalized chunk MSE over (obs, target_chunk) pairs."""
    if not heldout:
        raise ValueError("heldout set is empty")
    obs = np.stack([np.asarray(o, dtype=float) for o, _ in heldout])
    targets = np.stack([np.asarray(t, dtype=float) for _, t in heldout])
    target_norm = normalize_targets(snapshot.arch, targets)
    raw, _ = _forward(snapshot.weights, snapshot.arch, obs)
    diff = raw - target_norm
    return float(np.mean(diff * diff))


def save_checkpoint(snapshot: PolicySnapshot, path: str) -> None:
    from .protocol import write_weights

    with open(path, "wb") as sink:
        sink.write(write_weights(snapshot.to_wire()))


def load_checkpoint(arch: PolicyArch, path: str) -> PolicySnapshot:
    from .protocol import read_weights

    with open(path, "rb") as source:
        return PolicySnapshot.from_wire(arch, read_weights(source.read()))
