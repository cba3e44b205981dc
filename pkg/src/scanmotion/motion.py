"""Synthetic motion sequences, feature extractors, and the condition table.

A sequence is L frames of a 5-joint skeleton (root, two hands, two feet),
each joint carrying 3-D position plus 3-D velocity, where the velocity
channels are exactly the first differences of the positions (frame 0 gets
zero velocity).  Eight parametric classes, four families times two tempo /
magnitude variants, each with seeded per-sample jitter in phase, amplitude
and frequency:

    0 walk slow   1 walk fast     sinusoidal gait, advancing root
    2 jump low    3 jump high     ballistic vertical arcs between contacts
    4 turn left   5 turn right    root circling with rotating heading
    6 wave slow   7 wave fast     one oscillating end-effector, static body
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as tt
from .layers import Module
from .tensor import Tensor

NUM_CLASSES = 8
JOINTS = 5
FEATURES = 6  # x, y, z position + velocity
MIN_FRAMES, MAX_FRAMES = 16, 196
CLASS_NAMES = [
    "walk_slow", "walk_fast", "jump_low", "jump_high",
    "turn_left", "turn_right", "wave_slow", "wave_fast",
]

_DT = 1.0 / 30.0
_REST = np.array(
    [
        [0.0, 0.0, 1.0],  # root
        [0.1, 0.4, 1.0],  # left hand
        [0.1, -0.4, 1.0],  # right hand
        [0.0, 0.2, 0.1],  # left foot
        [0.0, -0.2, 0.1],  # right foot
    ]
)


@dataclass
class MotionSequence:
    data: np.ndarray  # (L, JOINTS, FEATURES)
    label: int

    def __post_init__(self):
        l, j, f = self.data.shape
        if j != JOINTS or f != FEATURES:
            raise ValueError(f"expected (L, {JOINTS}, {FEATURES}), got {self.data.shape}")
        if not MIN_FRAMES <= l <= MAX_FRAMES:
            raise ValueError(f"frame count {l} outside [{MIN_FRAMES}, {MAX_FRAMES}]")
        vel = np.diff(self.data[..., :3], axis=0)
        if np.abs(self.data[1:, :, 3:] - vel).max() > 1e-9:
            raise ValueError("velocity channels are not first differences of positions")

    @property
    def frames(self) -> int:
        return self.data.shape[0]

    @property
    def positions(self) -> np.ndarray:
        return self.data[..., :3]


def _with_velocities(pos: np.ndarray, label: int) -> MotionSequence:
    vel = np.zeros_like(pos)
    vel[1:] = np.diff(pos, axis=0)
    return MotionSequence(np.concatenate([pos, vel], axis=-1), label)


def _walk(length, fast, rng):
    freq = (2.2 if fast else 1.0) * rng.uniform(0.95, 1.05)
    amp = rng.uniform(0.9, 1.1)
    phase = rng.uniform(0.0, 2 * np.pi)
    tau = np.arange(length) * _DT
    ang = 2 * np.pi * freq * tau + phase
    pos = np.tile(_REST, (length, 1, 1))
    # gait-in-place: all coordinates stay bounded, the signature is spectral
    pos[:, 0, 0] += 0.05 * amp * np.sin(ang + 1.0)
    pos[:, 0, 1] += 0.03 * amp * np.sin(ang)
    pos[:, 0, 2] += 0.04 * amp * np.sin(2 * ang)
    pos[:, 3, 0] += 0.15 * amp * np.sin(ang)
    pos[:, 4, 0] += 0.15 * amp * np.sin(ang + np.pi)
    pos[:, 3, 2] += np.maximum(0.0, 0.12 * amp * np.sin(ang))
    pos[:, 4, 2] += np.maximum(0.0, 0.12 * amp * np.sin(ang + np.pi))
    pos[:, 1, 0] += 0.1 * amp * np.sin(ang + np.pi)
    pos[:, 2, 0] += 0.1 * amp * np.sin(ang)
    return pos


def _jump(length, high, rng):
    height = (0.7 if high else 0.25) * rng.uniform(0.9, 1.1)
    period = max(8, int(round(30 * 0.7 * rng.uniform(0.95, 1.05))))
    contact = max(2, int(round(period * 0.3)))
    air = period - contact
    arc = np.zeros(period)
    s = np.arange(air) / max(air - 1, 1)
    arc[contact:] = 4.0 * height * s * (1.0 - s)
    z = np.resize(arc, length)
    pos = np.tile(_REST, (length, 1, 1))
    pos[:, :, 2] += z[:, None]
    # arms track the arc for a distinct limb signature
    pos[:, 1, 2] += 0.3 * z
    pos[:, 2, 2] += 0.3 * z
    return pos


def _turn(length, left, rng):
    omega = 2 * np.pi * 0.15 * rng.uniform(0.9, 1.1) * (1.0 if left else -1.0)
    phase = rng.uniform(0.0, 2 * np.pi)
    radius = 0.5 * rng.uniform(0.9, 1.1)
    tau = np.arange(length) * _DT
    theta = omega * tau + phase
    center = np.array([radius * np.sin(theta), radius * (1 - np.cos(theta))]).T
    center -= center[0]
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    pos = np.empty((length, JOINTS, 3))
    for j in range(JOINTS):
        ox, oy, oz = _REST[j]
        pos[:, j, 0] = center[:, 0] + cos_t * ox - sin_t * oy
        pos[:, j, 1] = center[:, 1] + sin_t * ox + cos_t * oy
        pos[:, j, 2] = oz
    return pos


def _wave(length, fast, rng):
    freq = (3.2 if fast else 1.5) * rng.uniform(0.95, 1.05)
    amp = rng.uniform(0.9, 1.1)
    phase = rng.uniform(0.0, 2 * np.pi)
    tau = np.arange(length) * _DT
    ang = 2 * np.pi * freq * tau + phase
    pos = np.tile(_REST, (length, 1, 1))
    pos[:, 0, 1] += 0.01 * np.sin(ang)
    pos[:, 2, 2] += 0.3 + 0.25 * amp * np.sin(ang)
    pos[:, 2, 1] += 0.15 * amp * np.cos(ang)
    return pos


_GENERATORS = {
    0: lambda length, rng: _walk(length, False, rng),
    1: lambda length, rng: _walk(length, True, rng),
    2: lambda length, rng: _jump(length, False, rng),
    3: lambda length, rng: _jump(length, True, rng),
    4: lambda length, rng: _turn(length, True, rng),
    5: lambda length, rng: _turn(length, False, rng),
    6: lambda length, rng: _wave(length, False, rng),
    7: lambda length, rng: _wave(length, True, rng),
}


def generate_synthetic_motion(class_id: int, length: int, seed: int) -> MotionSequence:
    """Deterministic sample of one motion class; jitter is keyed by the seed."""
    if class_id not in _GENERATORS:
        raise ValueError(f"unknown motion class {class_id}")
    if not MIN_FRAMES <= length <= MAX_FRAMES:
        raise ValueError(f"length {length} outside [{MIN_FRAMES}, {MAX_FRAMES}]")
    rng = np.random.default_rng([seed, class_id, length])
    return _with_velocities(_GENERATORS[class_id](length, rng), class_id)


def make_dataset(count: int, seed: int, length_range=(MIN_FRAMES, MAX_FRAMES)):
    """Round-robin over classes so every class appears count // 8 (+-1) times."""
    rng = np.random.default_rng(seed)
    lo, hi = length_range
    out = []
    for i in range(count):
        length = int(rng.integers(lo, hi + 1))
        out.append(generate_synthetic_motion(i % NUM_CLASSES, length, int(rng.integers(2**31))))
    return out


# ---------------------------------------------------------------------------
# features (computed from positions only, so decoded sequences are scored on
# the same footing as real ones)


def _kinematics(seq: MotionSequence):
    pos = seq.positions
    vel = np.diff(pos, axis=0)
    acc = np.diff(vel, axis=0)
    return pos, vel, acc


def _zero_cross_rate(x: np.ndarray) -> float:
    signs = np.sign(x - x.mean())
    signs = signs[signs != 0]
    if signs.size < 2:
        return 0.0
    return float(np.mean(signs[1:] != signs[:-1]))


def _signed_turn_rate(pos, vel) -> float:
    # z-component of the cross product of successive horizontal root velocities
    v = vel[:, 0, :2]
    if len(v) < 2:
        return 0.0
    cross = v[:-1, 0] * v[1:, 1] - v[:-1, 1] * v[1:, 0]
    return float(cross.mean() * 1e3)


def metric_features(seq: MotionSequence) -> np.ndarray:
    """Compact 10-d summary used for the Frechet metric and diversity."""
    pos, vel, acc = _kinematics(seq)
    root_speed = np.linalg.norm(vel[:, 0, :2], axis=-1)
    rh_acc = np.linalg.norm(acc[:, 2], axis=-1)
    feet_z = pos[:, 3:, 2]
    return np.array(
        [
            root_speed.mean(),
            pos[:, 0, 2].std(),
            pos[:, 0, 2].max() - pos[:, 0, 2].min(),
            _signed_turn_rate(pos, vel),
            np.sqrt((rh_acc**2).mean()),
            pos[:, 2, 2].std(),
            feet_z.std(),
            _zero_cross_rate(pos[:, 0, 1]),
            _zero_cross_rate(pos[:, 2, 2]),
            pos[:, 2, 2].mean(),
        ]
    )


def probe_features(seq: MotionSequence) -> np.ndarray:
    """Richer per-joint statistics for the linear class probe."""
    pos, vel, acc = _kinematics(seq)
    parts = [pos.mean(axis=0).ravel(), pos.std(axis=0).ravel()]
    speed = np.linalg.norm(vel, axis=-1)
    parts.append(speed.mean(axis=0))
    parts.append(np.sqrt((np.linalg.norm(acc, axis=-1) ** 2).mean(axis=0)))
    parts.append(np.array([_zero_cross_rate(pos[:, j, 2]) for j in range(JOINTS)]))
    parts.append(np.array([_signed_turn_rate(pos, vel)]))
    return np.concatenate(parts)


def feature_matrix(seqs, extractor=metric_features) -> np.ndarray:
    return np.stack([extractor(s) for s in seqs])


# ---------------------------------------------------------------------------
# condition embedding


class ConditionTable(Module):
    """Learned per-class embedding rows plus one null row (index num_classes)."""

    def __init__(self, num_classes: int, dim: int, rng: np.random.Generator):
        self.num_classes = num_classes
        self.dim = dim
        rows = rng.standard_normal((num_classes + 1, dim))
        # re-sample until all rows are pairwise distinct (deterministic given rng)
        while len(np.unique(rows.round(12), axis=0)) != num_classes + 1:
            rows = rng.standard_normal((num_classes + 1, dim))
        self.table = tt.tensor(rows, requires_grad=True)

    @property
    def null_id(self) -> int:
        return self.num_classes

    def __call__(self, class_ids) -> Tensor:
        """Look up rows; pass None (or the null id) for the null embedding."""
        if class_ids is None:
            class_ids = np.array([self.null_id])
        ids = np.atleast_1d(np.asarray(class_ids, dtype=np.int64))
        if np.any(ids < 0) or np.any(ids > self.num_classes):
            raise ValueError(f"condition id out of range: {ids}")
        return tt.gather_rows(self.table, ids)

    def null(self, batch: int) -> Tensor:
        return self(np.full(batch, self.null_id, dtype=np.int64))
