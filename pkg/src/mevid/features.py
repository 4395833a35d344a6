"""Frozen-backbone features: synthetic generation and binary file I/O.

The synthetic backbone produces per-frame spatial token grids where phase
identity is carried by a small "actor" patch moving over a static
per-video background — classification is only solvable by localizing the
actor. Real externally-extracted features can be ingested through the
MVFF binary format defined at the bottom of this module.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np


class SpecError(ValueError):
    """Invalid synthetic dataset specification."""


class FormatError(ValueError):
    """Malformed MVFF payload."""


class MagicError(FormatError):
    pass


class VersionError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the deterministic synthetic backbone."""

    num_videos: int = 40
    frames_per_video: int = 32
    grid_side: int = 8
    channels: int = 32
    num_phases: int = 4
    num_layers: int = 3
    actor_patch_side: int = 3
    noise_sigma: float = 0.1
    seed: int = 0

    def __post_init__(self):
        counts = {
            "num_videos": self.num_videos,
            "frames_per_video": self.frames_per_video,
            "grid_side": self.grid_side,
            "channels": self.channels,
            "num_layers": self.num_layers,
            "actor_patch_side": self.actor_patch_side,
        }
        for name, value in counts.items():
            if value < 1:
                raise SpecError(f"{name} must be positive, got {value}")
        if self.num_phases < 2:
            raise SpecError(f"num_phases must be >= 2, got {self.num_phases}")
        if self.actor_patch_side > self.grid_side:
            raise SpecError(
                f"actor patch side {self.actor_patch_side} exceeds grid side {self.grid_side}"
            )
        if self.noise_sigma < 0:
            raise SpecError(f"noise_sigma must be nonnegative, got {self.noise_sigma}")
        if 2 * self.num_phases > self.frames_per_video:
            raise SpecError(
                f"cannot fit {self.num_phases} phases of >= 2 frames into "
                f"{self.frames_per_video} frames"
            )


@dataclass
class VideoFeatures:
    """Per-frame, per-layer spatial token grids with optional annotations.

    Every layer is a float32 array of shape [T, S, D]; all layers share
    identical T, S, D. Timestamps are strictly increasing frame indices.
    """

    video_id: str
    num_frames: int
    layers: list[np.ndarray]
    timestamps: np.ndarray
    labels: np.ndarray | None = None
    progression: np.ndarray | None = None

    def __post_init__(self):
        if not self.layers:
            raise ValueError("VideoFeatures needs at least one layer")
        shape = self.layers[0].shape
        for arr in self.layers:
            if arr.ndim != 3 or arr.shape != shape:
                raise ValueError(f"layer shapes differ: {arr.shape} vs {shape}")
        if shape[0] != self.num_frames:
            raise ValueError(f"num_frames {self.num_frames} != layer T {shape[0]}")
        ts = np.asarray(self.timestamps)
        if ts.shape != (self.num_frames,) or np.any(np.diff(ts) <= 0):
            raise ValueError("timestamps must be strictly increasing, one per frame")
        if self.labels is not None and len(self.labels) != self.num_frames:
            raise ValueError("labels length does not match frame count")
        if self.progression is not None and len(self.progression) != self.num_frames:
            raise ValueError("progression length does not match frame count")

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def num_tokens(self) -> int:
        return self.layers[0].shape[1]

    @property
    def channels(self) -> int:
        return self.layers[0].shape[2]


@dataclass
class VideoLayout:
    """Seed-reconstructible ground truth for one synthetic video."""

    video_id: str
    background: np.ndarray          # [D]
    durations: np.ndarray           # [K] frames per phase, each >= 2
    labels: np.ndarray              # [T] phase index per frame
    progression: np.ndarray         # [T] time to next boundary / T
    positions: np.ndarray           # [T, 2] actor patch top-left (row, col)


@dataclass
class DatasetLayout:
    """Ground truth shared by the whole dataset plus per-video layouts."""

    spec: SyntheticSpec
    phase_signatures: np.ndarray    # [K, D], shared across videos
    layer_maps: list[np.ndarray]    # [D, D] per layer; layer 0 is identity
    videos: list[VideoLayout] = field(default_factory=list)


def _phase_durations(rng: np.random.Generator, frames: int, phases: int) -> np.ndarray:
    extra = rng.multinomial(frames - 2 * phases, np.full(phases, 1.0 / phases))
    return (extra + 2).astype(np.int64)


def _actor_positions(rng: np.random.Generator, frames: int, grid: int, patch: int) -> np.ndarray:
    # Smooth sinusoidal drift of the patch top-left, clamped to the grid.
    span = grid - patch
    center = span / 2.0
    pos = np.zeros((frames, 2), dtype=np.int64)
    t = np.arange(frames)
    for axis in range(2):
        omega = rng.uniform(0.1, 0.5)
        phi = rng.uniform(0.0, 2.0 * np.pi)
        path = center + center * np.sin(omega * t + phi)
        pos[:, axis] = np.clip(np.round(path), 0, span).astype(np.int64)
    return pos


def synthetic_layout(spec: SyntheticSpec) -> DatasetLayout:
    """Reconstruct the dataset's ground truth from its seed alone."""
    rng = np.random.default_rng(spec.seed)
    d = spec.channels
    # Signatures share a common "actor present" component; the per-phase
    # parts stay distinct. Phase identity needs the distinct parts, while
    # the actor itself remains one concept across phases.
    actor_common = rng.standard_normal((1, d))
    signatures = actor_common + rng.standard_normal((spec.num_phases, d))
    maps = [np.eye(d)]
    for _ in range(spec.num_layers - 1):
        maps.append(rng.standard_normal((d, d)) / np.sqrt(d))

    layout = DatasetLayout(
        spec=spec,
        phase_signatures=signatures.astype(np.float32),
        layer_maps=[m.astype(np.float32) for m in maps],
    )
    t_total = spec.frames_per_video
    for v in range(spec.num_videos):
        background = rng.standard_normal(d).astype(np.float32)
        durations = _phase_durations(rng, t_total, spec.num_phases)
        labels = np.repeat(np.arange(spec.num_phases), durations)
        boundaries = np.cumsum(durations)
        next_boundary = boundaries[labels]
        progression = ((next_boundary - np.arange(t_total)) / t_total).astype(np.float32)
        positions = _actor_positions(rng, t_total, spec.grid_side, spec.actor_patch_side)
        layout.videos.append(
            VideoLayout(
                video_id=f"vid{v:04d}",
                background=background,
                durations=durations,
                labels=labels.astype(np.int64),
                progression=progression,
                positions=positions,
            )
        )
    return layout


def _patch_token_indices(pos: np.ndarray, grid: int, patch: int) -> np.ndarray:
    rows = pos[0] + np.arange(patch)
    cols = pos[1] + np.arange(patch)
    return (rows[:, None] * grid + cols[None, :]).reshape(-1)


def generate_synthetic_dataset(spec: SyntheticSpec) -> list[VideoFeatures]:
    """Generate the full dataset; a pure function of the spec (incl. seed)."""
    layout = synthetic_layout(spec)
    noise_rng = np.random.default_rng([spec.seed, 1])
    s = spec.grid_side * spec.grid_side
    videos = []
    for vl in layout.videos:
        base = np.tile(vl.background, (spec.frames_per_video, s, 1)).astype(np.float32)
        for t in range(spec.frames_per_video):
            tokens = _patch_token_indices(vl.positions[t], spec.grid_side, spec.actor_patch_side)
            base[t, tokens] += layout.phase_signatures[vl.labels[t]]
        if spec.noise_sigma > 0:
            base += spec.noise_sigma * noise_rng.standard_normal(base.shape).astype(np.float32)
        layers = [np.ascontiguousarray(base @ m) for m in layout.layer_maps]
        videos.append(
            VideoFeatures(
                video_id=vl.video_id,
                num_frames=spec.frames_per_video,
                layers=layers,
                timestamps=np.arange(spec.frames_per_video, dtype=np.int64),
                labels=vl.labels.copy(),
                progression=vl.progression.copy(),
            )
        )
    return videos


def select_layers(features: VideoFeatures, layer_ids: list[int]) -> VideoFeatures:
    """Keep the listed layers, order preserved; indices must strictly increase."""
    if not layer_ids:
        raise ValueError("layer selection is empty")
    if any(b <= a for a, b in zip(layer_ids, layer_ids[1:])):
        raise ValueError(f"layer ids must be strictly increasing, got {layer_ids}")
    for i in layer_ids:
        if not 0 <= i < features.num_layers:
            raise ValueError(
                f"layer id {i} out of range for {features.num_layers} layers"
            )
    return VideoFeatures(
        video_id=features.video_id,
        num_frames=features.num_frames,
        layers=[features.layers[i] for i in layer_ids],
        timestamps=features.timestamps,
        labels=features.labels,
        progression=features.progression,
    )


# ---------------------------------------------------------------------------
# MVFF binary format, version 1 (little-endian):
#   magic "MVFF", version u32, T u32, L u32, S u32, D u32,
#   T*L*S*D float32 ordered [frame][layer][token][channel],
#   label flag u8; if 1: T u32 labels then T float32 progression values.
# Timestamps are implicit 0..T-1.

_MAGIC = b"MVFF"
_VERSION = 1
_HEADER = struct.Struct("<4sIIIII")


def write_mvff(features: VideoFeatures, path) -> None:
    t, l = features.num_frames, features.num_layers
    s, d = features.num_tokens, features.channels
    if not np.array_equal(features.timestamps, np.arange(t)):
        raise ValueError("MVFF v1 stores implicit timestamps 0..T-1 only")
    has_labels = features.labels is not None or features.progression is not None
    if has_labels and (features.labels is None or features.progression is None):
        raise ValueError("MVFF v1 stores labels and progression together or not at all")

    grid = np.stack(features.layers, axis=1)  # [T, L, S, D]
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, _VERSION, t, l, s, d))
        fh.write(np.ascontiguousarray(grid, dtype="<f4").tobytes())
        fh.write(struct.pack("<B", 1 if has_labels else 0))
        if has_labels:
            fh.write(np.ascontiguousarray(features.labels, dtype="<u4").tobytes())
            fh.write(np.ascontiguousarray(features.progression, dtype="<f4").tobytes())


def load_mvff(path, video_id: str | None = None) -> VideoFeatures:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise TruncatedError(f"file is {len(raw)} bytes, shorter than the header")
    magic, version, t, l, s, d = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise MagicError(f"bad magic {magic!r}, expected {_MAGIC!r}")
    if version != _VERSION:
        raise VersionError(f"unsupported version {version}, expected {_VERSION}")

    offset = _HEADER.size
    payload = t * l * s * d * 4
    if len(raw) < offset + payload + 1:
        raise TruncatedError(
            f"payload needs {payload + 1} bytes after header, found {len(raw) - offset}"
        )
    grid = np.frombuffer(raw, dtype="<f4", count=t * l * s * d, offset=offset)
    grid = grid.reshape(t, l, s, d)
    offset += payload
    flag = raw[offset]
    offset += 1
    labels = progression = None
    if flag == 1:
        block = t * 4 * 2
        if len(raw) < offset + block:
            raise TruncatedError(f"label block needs {block} bytes, found {len(raw) - offset}")
        labels = np.frombuffer(raw, dtype="<u4", count=t, offset=offset).astype(np.int64)
        offset += t * 4
        progression = np.frombuffer(raw, dtype="<f4", count=t, offset=offset).copy()
    elif flag != 0:
        raise FormatError(f"label flag must be 0 or 1, got {flag}")

    if video_id is None:
        import os

        video_id = os.path.splitext(os.path.basename(str(path)))[0]
    return VideoFeatures(
        video_id=video_id,
        num_frames=t,
        layers=[np.ascontiguousarray(grid[:, i]) for i in range(l)],
        timestamps=np.arange(t, dtype=np.int64),
        labels=labels,
        progression=progression,
    )
