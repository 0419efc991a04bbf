"""Adam training of member networks and the candidate-pool selection procedure."""

from __future__ import annotations

import dataclasses
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from wisdomnet.errors import NonFiniteError, TrainingDivergedError
from wisdomnet.member_network import MemberNetwork, build_member

log = logging.getLogger(__name__)

COVID_EPOCHS = (4, 10)
ARDS_EPOCHS = (10, 15)
SELECTION_CRITERIA = ("top-k", "random-sample")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    decay: float = 0.0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    epochs_min: int = COVID_EPOCHS[0]
    epochs_max: int = COVID_EPOCHS[1]
    batch_size: int = 8
    pool_size: int = 200
    selected_count: int = 80
    selection: str = "top-k"
    seed: int = 0
    augment: bool = True
    aug_flip_prob: float = 0.5
    aug_max_rotation: float = 10.0
    aug_max_translation: float = 0.05
    workers: int = 1

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.decay < 0:
            raise ValueError("decay must be non-negative")
        for name in ("adam_beta1", "adam_beta2"):
            if not 0 <= getattr(self, name) < 1:
                raise ValueError(f"{name} must lie in [0, 1)")
        if self.adam_eps <= 0:
            raise ValueError("adam_eps must be positive")
        if not 0 <= self.epochs_min <= self.epochs_max:
            raise ValueError("need 0 <= epochs_min <= epochs_max")
        if self.batch_size < 1 or self.pool_size < 1 or self.workers < 1:
            raise ValueError("batch_size, pool_size and workers must be >= 1")
        if not 1 <= self.selected_count <= self.pool_size:
            raise ValueError("selected_count must lie in [1, pool_size]")
        if self.selection not in SELECTION_CRITERIA:
            raise ValueError(f"selection must be one of {SELECTION_CRITERIA}")

    @classmethod
    def for_ards(cls, **overrides) -> "TrainConfig":
        overrides.setdefault("epochs_min", ARDS_EPOCHS[0])
        overrides.setdefault("epochs_max", ARDS_EPOCHS[1])
        return cls(**overrides)

    @classmethod
    def from_mapping(cls, values: dict) -> "TrainConfig":
        """Build from string values, e.g. one section of a config file."""
        kwargs = {}
        fields = {f.name: f for f in dataclasses.fields(cls)}
        for key, raw in values.items():
            if key not in fields:
                raise ValueError(f"unknown training key {key!r}")
            kwargs[key] = coerce_value(fields[key].type, raw)
        return cls(**kwargs)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def coerce_value(type_name, raw):
    if not isinstance(raw, str):
        return raw
    text = raw.strip()
    if type_name in ("bool", bool):
        lowered = text.lower()
        if lowered in ("1", "true", "yes", "on"):
            return True
        if lowered in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if type_name in ("int", int):
        return int(text)
    if type_name in ("float", float):
        return float(text)
    return text


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls([np.zeros_like(p.data) for p in params], [np.zeros_like(p.data) for p in params])


def adam_step(params, grads, state: AdamState, config: TrainConfig) -> AdamState:
    """Bias-corrected Adam update applied in place to each ``Tensor`` in ``params``.

    With ``config.decay > 0`` the step size is ``lr / (1 + decay * t)`` where
    ``t`` counts previous steps.
    """
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params, grads and optimiser state must have equal length")
    for p, g in zip(params, grads):
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter of shape {p.shape} at step {state.t + 1}")
    lr = config.learning_rate / (1 + config.decay * state.t)
    state.t += 1
    b1, b2 = config.adam_beta1, config.adam_beta2
    c1 = 1 - b1 ** state.t
    c2 = 1 - b2 ** state.t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + config.adam_eps)).astype(p.data.dtype, copy=False)
    return state


# --- augmentation -----------------------------------------------------------

def apply_transform(image: np.ndarray, flip: bool = False, angle: float = 0.0,
                    shift=(0.0, 0.0)) -> np.ndarray:
    """Horizontal flip, then rotation by ``angle`` degrees about the centre and
    a translation of ``shift`` pixels (dy, dx); uncovered pixels are zero."""
    out = np.array(image[:, ::-1] if flip else image)
    if angle == 0 and shift[0] == 0 and shift[1] == 0:
        return out
    h, w = out.shape[:2]
    theta = math.radians(angle)
    rot = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    centre = np.array([(h - 1) / 2, (w - 1) / 2])
    # output pixel o samples input at rot @ (o - centre - shift) + centre
    offset = centre - rot @ (centre + np.asarray(shift, dtype=float))
    matrix = np.eye(3)
    matrix[:2, :2] = rot
    result = ndimage.affine_transform(out, matrix, offset=(*offset, 0.0), order=1,
                                      mode="constant", cval=0.0)
    return np.clip(result, 0, 1).astype(image.dtype, copy=False)


def augment(image: np.ndarray, rng, config: TrainConfig | None = None) -> np.ndarray:
    """Random flip, small rotation and small translation of one image."""
    config = config or TrainConfig()
    side = image.shape[0]
    flip = bool(rng.random() < config.aug_flip_prob)
    angle = float(rng.uniform(-config.aug_max_rotation, config.aug_max_rotation))
    limit = config.aug_max_translation * side
    shift = tuple(float(s) for s in rng.uniform(-limit, limit, size=2))
    return apply_transform(image, flip, angle, shift)


# --- training ----------------------------------------------------------------

def _arrays(dataset):
    if isinstance(dataset, tuple):
        return dataset
    return dataset.arrays()


def train_member(net: MemberNetwork, dataset, epochs: int, config: TrainConfig):
    """Train ``net`` in place for ``epochs`` passes over ``dataset``.

    Returns ``(net, loss_history)`` with one loss per mini-batch. Batches are
    reshuffled every epoch by an RNG seeded from ``(config.seed, net.seed)``.
    """
    if epochs < 0:
        raise ValueError("epochs must be non-negative")
    images, labels = _arrays(dataset)
    n = len(images)
    if n == 0:
        raise ValueError("cannot train on an empty dataset")
    if labels.shape != (n, 2) or not np.all(labels.sum(axis=1) == 1):
        raise ValueError("labels must be one-hot rows")
    rng = np.random.default_rng([config.seed, net.seed])
    params = net.parameters()
    state = AdamState.zeros_like(params)
    history: list[float] = []
    for epoch in range(epochs):
        order = rng.permutation(n)
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            batch = images[idx]
            if config.augment:
                batch = np.stack([augment(img, rng, config) for img in batch])
            net.zero_grad()
            try:
                probs, cache = net.forward_batch(batch, keep_cache=True)
                loss = net.backward(cache, labels[idx], probs)
                if not math.isfinite(loss):
                    raise NonFiniteError("loss is not finite")
                adam_step(params, [p.grad for p in params], state, config)
            except NonFiniteError as exc:
                raise TrainingDivergedError(epoch, b, str(exc)) from exc
            history.append(loss)
    return net, history


@dataclass
class PoolMember:
    net: MemberNetwork
    epochs: int
    loss_history: list[float] = field(default_factory=list)

    @property
    def seed(self) -> int:
        return self.net.seed


def pool_plan(config: TrainConfig) -> list[tuple[int, int]]:
    """Distinct member seeds and per-member epoch counts drawn from ``config.seed``."""
    rng = np.random.default_rng(config.seed)
    seeds = rng.choice(2 ** 31 - 1, size=config.pool_size, replace=False)
    epochs = rng.integers(config.epochs_min, config.epochs_max + 1, size=config.pool_size)
    return [(int(s), int(e)) for s, e in zip(seeds, epochs)]


def _train_one(args) -> PoolMember:
    seed, epochs, input_side, arrays, config = args
    net = build_member(seed, input_side)
    net, history = train_member(net, arrays, epochs, config)
    return PoolMember(net, epochs, history)


def train_candidate_pool(dataset, config: TrainConfig, input_side: int | None = None) -> list[PoolMember]:
    """Train ``config.pool_size`` independent members, each with its own seed."""
    if config.pool_size < config.selected_count:
        raise ValueError("pool_size must be at least selected_count")
    arrays = _arrays(dataset)
    side = input_side or arrays[0].shape[1]
    jobs = [(seed, epochs, side, arrays, config) for seed, epochs in pool_plan(config)]
    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as ex:
            pool = list(ex.map(_train_one, jobs))
    else:
        pool = []
        for i, job in enumerate(jobs):
            pool.append(_train_one(job))
            log.info("pool member %d/%d seed=%d epochs=%d final loss %.4f", i + 1, len(jobs),
                     job[0], job[1], pool[-1].loss_history[-1] if pool[-1].loss_history else float("nan"))
    return pool


def validation_accuracy(net: MemberNetwork, dataset, batch_size: int = 32) -> float:
    images, labels = _arrays(dataset)
    hits = 0
    for start in range(0, len(images), batch_size):
        probs = net.forward_batch(images[start:start + batch_size])
        hits += int(np.sum(probs.argmax(axis=1) == labels[start:start + batch_size].argmax(axis=1)))
    return hits / len(images)


def select_members(pool, validation_set, k: int, criterion: str = "top-k", seed=0) -> list:
    """Pick ``k`` members from ``pool``, returned in their original pool order.

    ``"top-k"`` ranks by validation accuracy (ties to the lower seed);
    ``"random-sample"`` draws a seeded uniform subset.
    """
    if not 1 <= k <= len(pool):
        raise ValueError(f"cannot select {k} members from a pool of {len(pool)}")
    if criterion == "random-sample":
        chosen = np.sort(np.random.default_rng(seed).choice(len(pool), size=k, replace=False))
        return [pool[i] for i in chosen]
    if criterion != "top-k":
        raise ValueError(f"unknown selection criterion {criterion!r}")
    if validation_set is None or len(_arrays(validation_set)[0] if isinstance(validation_set, tuple)
                                     else validation_set) == 0:
        raise ValueError("top-k selection needs a non-empty validation set")
    nets = [m.net if isinstance(m, PoolMember) else m for m in pool]
    scores = [validation_accuracy(net, validation_set) for net in nets]
    ranked = sorted(range(len(pool)), key=lambda i: (-scores[i], nets[i].seed))
    chosen = sorted(ranked[:k])
    return [pool[i] for i in chosen]
