"""Synthetic video data: moving-shape generation, clip windows, pixel
squeeze/unsqueeze, and the on-disk sequence format.

Sequence file layout (little-endian throughout):

    bytes 0..7    magic ``STVPDS1\\0``
    bytes 8..23   four uint32: T, C, H, W
    bytes 24..    T*C*H*W float32 values, row-major [t][c][h][w]

Values are stored as float32 in [0,1]; 8-bit PNG export exists for visual
inspection only. Generation is fully determined by the seed: each sequence
draws from an independent RNG stream seeded with ``seed XOR sequence_index``,
so regeneration with identical arguments is bit-identical and sequences can
be produced in parallel.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .errors import FormatError, ValidationError

MAGIC = b"STVPDS1\x00"
_HEADER = struct.Struct("<4I")
_MAX_ELEMENTS = 1 << 33  # 32 GiB of float32; anything above is a corrupt header

SHAPE_KINDS = ("rectangle", "circle", "triangle")


# ---------------------------------------------------------------------------
# domain types


@dataclass
class VideoSequence:
    """A finite ordered set of frames, values in [0,1], shape [T, C, H, W]."""

    frames: np.ndarray
    sequence_id: str = ""
    frame_rate: float = 0.0  # informational only

    def __post_init__(self):
        f = self.frames
        if f.ndim != 4:
            raise ValidationError(f"frames must be [T,C,H,W], got shape {f.shape}")
        if f.shape[0] < 2:
            raise ValidationError(f"sequence needs T >= 2 frames, got {f.shape[0]}")
        if not np.isfinite(f).all():
            raise ValidationError("sequence contains non-finite values")
        if f.min() < 0.0 or f.max() > 1.0:
            raise ValidationError("sequence values must lie in [0,1]")

    @property
    def shape(self):
        return self.frames.shape


@dataclass
class ClipWindow:
    """L successive frames ending at (1-based) frame index t_index."""

    clip: np.ndarray  # [L, C, H, W]
    t_index: int


@dataclass
class SequenceEntry:
    sequence_id: str
    file: str
    T: int
    C: int
    H: int
    W: int


@dataclass
class DatasetManifest:
    root: Path
    entries: list[SequenceEntry] = field(default_factory=list)
    seed: int = 0
    split: str = "train"

    def sequence_path(self, entry: SequenceEntry) -> Path:
        return Path(self.root) / entry.file

    def save(self) -> Path:
        path = Path(self.root) / "manifest.json"
        doc = {
            "seed": self.seed,
            "split": self.split,
            "sequences": [
                {"sequence_id": e.sequence_id, "file": e.file,
                 "T": e.T, "C": e.C, "H": e.H, "W": e.W}
                for e in self.entries
            ],
        }
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=2)
            fh.write("\n")
        return path


def load_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    root = path.parent if path.is_file() else path
    if path.is_dir():
        path = path / "manifest.json"
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except FileNotFoundError:
        raise FormatError(f"manifest not found at {path}") from None
    except json.JSONDecodeError as exc:
        raise FormatError(f"manifest {path} is not valid JSON: {exc}") from exc
    entries = [SequenceEntry(s["sequence_id"], s["file"], s["T"], s["C"], s["H"], s["W"])
               for s in doc["sequences"]]
    manifest = DatasetManifest(root=root, entries=entries,
                               seed=doc["seed"], split=doc["split"])
    for entry in manifest.entries:
        if not manifest.sequence_path(entry).is_file():
            raise FormatError(f"manifest lists missing file {entry.file}")
    return manifest


# ---------------------------------------------------------------------------
# binary sequence format


def write_frames(path: str | Path, frames: np.ndarray) -> None:
    """Write a [T,C,H,W] float32 array in the sequence file format."""
    if frames.ndim != 4:
        raise ValidationError(f"frames must be [T,C,H,W], got shape {frames.shape}")
    data = np.ascontiguousarray(frames, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_HEADER.pack(*frames.shape))
        fh.write(data.tobytes())


def read_frames(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) or blob[:len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: bad magic at offset 0")
    header_end = len(MAGIC) + _HEADER.size
    if len(blob) < header_end:
        raise FormatError(f"{path}: truncated header at offset {len(blob)}")
    t, c, h, w = _HEADER.unpack(blob[len(MAGIC):header_end])
    if min(t, c, h, w) < 1 or t * c * h * w > _MAX_ELEMENTS:
        raise FormatError(
            f"{path}: dimension overflow in header at offset {len(MAGIC)} "
            f"(T={t} C={c} H={h} W={w})")
    expected = 4 * t * c * h * w
    payload = blob[header_end:]
    if len(payload) < expected:
        raise FormatError(
            f"{path}: truncated payload at offset {header_end}: "
            f"expected {expected} bytes, found {len(payload)}")
    if len(payload) > expected:
        raise FormatError(
            f"{path}: {len(payload) - expected} trailing bytes at offset "
            f"{header_end + expected}")
    frames = np.frombuffer(payload, dtype="<f4").reshape(t, c, h, w)
    return frames.copy()


def save_sequence(seq: VideoSequence, path: str | Path) -> None:
    write_frames(path, seq.frames)


def load_sequence(path: str | Path, sequence_id: str = "") -> VideoSequence:
    frames = read_frames(path)
    return VideoSequence(frames, sequence_id=sequence_id or Path(path).stem)


# ---------------------------------------------------------------------------
# clip windows


def make_clip(seq: VideoSequence, t: int, length: int) -> ClipWindow:
    """Frames t-length+1 .. t (1-based); indices below 1 replicate frame 1."""
    if length < 1:
        raise ValidationError(f"clip length must be >= 1, got {length}")
    total = seq.frames.shape[0]
    if not 1 <= t <= total:
        raise IndexError(f"t={t} outside [1, {total}]")
    idx = [max(j, 1) - 1 for j in range(t - length + 1, t + 1)]
    return ClipWindow(clip=seq.frames[idx], t_index=t)


# ---------------------------------------------------------------------------
# pixel squeeze / unsqueeze


def pixel_unshuffle(x: torch.Tensor, patch: int) -> torch.Tensor:
    """Rearrange [..., C, H, W] to [..., C*patch^2, H/patch, W/patch]."""
    if patch < 1:
        raise ValidationError(f"patch must be >= 1, got {patch}")
    if x.dim() < 3:
        raise ValidationError(f"expected at least [C,H,W], got {tuple(x.shape)}")
    h, w = x.shape[-2], x.shape[-1]
    if h % patch or w % patch:
        raise ValidationError(
            f"spatial dims {h}x{w} not divisible by patch {patch}")
    if patch == 1:
        return x
    return F.pixel_unshuffle(x, patch)


def pixel_shuffle(x: torch.Tensor, patch: int) -> torch.Tensor:
    """Exact inverse of pixel_unshuffle."""
    if patch < 1:
        raise ValidationError(f"patch must be >= 1, got {patch}")
    if x.dim() < 3:
        raise ValidationError(f"expected at least [C,H,W], got {tuple(x.shape)}")
    if x.shape[-3] % (patch * patch):
        raise ValidationError(
            f"channel count {x.shape[-3]} not divisible by patch^2 = {patch * patch}")
    if patch == 1:
        return x
    return F.pixel_shuffle(x, patch)


# ---------------------------------------------------------------------------
# moving-shape generator


@dataclass
class ShapeSpec:
    kind: str          # rectangle | circle | triangle
    cx: float
    cy: float
    vx: float          # pixels per frame
    vy: float
    size: float        # characteristic half-extent in pixels
    intensity: float


def reflect_step(pos: float, vel: float, lo: float, hi: float) -> tuple[float, float]:
    """Advance one frame with reflective kinematics on [lo, hi]."""
    pos = pos + vel
    while pos > hi or pos < lo:
        if pos > hi:
            pos = 2.0 * hi - pos
        else:
            pos = 2.0 * lo - pos
        vel = -vel
    return pos, vel


def shape_track(spec: ShapeSpec, steps: int, height: int, width: int) -> list[tuple[float, float]]:
    """Center positions for frames 0..steps-1 under reflective kinematics."""
    cx, cy, vx, vy = spec.cx, spec.cy, spec.vx, spec.vy
    track = [(cx, cy)]
    for _ in range(steps - 1):
        cx, vx = reflect_step(cx, vx, 0.0, width - 1.0)
        cy, vy = reflect_step(cy, vy, 0.0, height - 1.0)
        track.append((cx, cy))
    return track


def render_shapes(shapes: list[ShapeSpec], centers: list[tuple[float, float]],
                  height: int, width: int) -> np.ndarray:
    """Rasterize shapes at the given centers into one [1,H,W] frame in [0,1].

    Edges fall off linearly over one pixel; overlaps compose with max, so the
    frame stays in [0,1] regardless of shape count.
    """
    yy, xx = np.meshgrid(np.arange(height, dtype=np.float32),
                         np.arange(width, dtype=np.float32), indexing="ij")
    frame = np.zeros((height, width), dtype=np.float32)
    for spec, (cx, cy) in zip(shapes, centers):
        dx = xx - np.float32(cx)
        dy = yy - np.float32(cy)
        s = np.float32(spec.size)
        if spec.kind == "circle":
            dist = np.sqrt(dx * dx + dy * dy)
            mask = np.clip(s + np.float32(0.5) - dist, 0.0, 1.0)
        elif spec.kind == "rectangle":
            mx = np.clip(s + np.float32(0.5) - np.abs(dx), 0.0, 1.0)
            my = np.clip(s + np.float32(0.5) - np.abs(dy), 0.0, 1.0)
            mask = mx * my
        elif spec.kind == "triangle":
            # isoceles triangle, apex (0,-s), base corners (+-s,+s); mask from
            # the inner signed distance to the three edges
            inv = np.float32(1.0 / np.sqrt(5.0))
            d_left = (2.0 * dx + dy + s) * inv
            d_right = (-2.0 * dx + dy + s) * inv
            d_base = s - dy
            inner = np.minimum(np.minimum(d_left, d_right), d_base)
            mask = np.clip(np.float32(0.5) + inner, 0.0, 1.0)
        else:
            raise ValidationError(f"unknown shape kind {spec.kind!r}")
        frame = np.maximum(frame, np.float32(spec.intensity) * mask)
    return frame[None].astype(np.float32)


def random_shapes(rng: np.random.Generator, num_shapes: int,
                  height: int, width: int) -> list[ShapeSpec]:
    shapes = []
    max_size = max(4.0, min(height, width) / 5.0)
    for _ in range(num_shapes):
        kind = SHAPE_KINDS[int(rng.integers(len(SHAPE_KINDS)))]
        size = float(rng.uniform(3.0, max_size))
        cx = float(rng.uniform(size, width - 1.0 - size))
        cy = float(rng.uniform(size, height - 1.0 - size))
        vx = float(rng.uniform(-2.5, 2.5))
        vy = float(rng.uniform(-2.5, 2.5))
        intensity = float(rng.uniform(0.4, 1.0))
        shapes.append(ShapeSpec(kind, cx, cy, vx, vy, size, intensity))
    return shapes


def generate_sequence(rng: np.random.Generator, frames: int, height: int,
                      width: int, num_shapes: int) -> tuple[np.ndarray, list[ShapeSpec]]:
    shapes = random_shapes(rng, num_shapes, height, width)
    tracks = [shape_track(s, frames, height, width) for s in shapes]
    out = np.empty((frames, 1, height, width), dtype=np.float32)
    for t in range(frames):
        out[t] = render_shapes(shapes, [track[t] for track in tracks], height, width)
    return out, shapes


def sequence_rng(seed: int, index: int) -> np.random.Generator:
    """Independent per-sequence stream: seed XOR sequence index."""
    return np.random.default_rng((seed ^ index) & 0xFFFFFFFFFFFFFFFF)


def generate_moving_shapes(out_dir: str | Path, num_sequences: int, frames: int,
                           height: int, width: int, num_shapes: int, seed: int,
                           split: str = "train") -> DatasetManifest:
    """Write a deterministic moving-shape dataset and its manifest."""
    if height < 32 or width < 32:
        raise ValidationError(f"height/width must be >= 32, got {height}x{width}")
    if frames < 2:
        raise ValidationError(f"frames must be >= 2, got {frames}")
    if num_sequences < 1:
        raise ValidationError(f"num_sequences must be >= 1, got {num_sequences}")
    if num_shapes < 1:
        raise ValidationError(f"num_shapes must be >= 1, got {num_shapes}")

    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out_dir}: {exc}") from exc

    manifest = DatasetManifest(root=out_dir, seed=seed, split=split)
    for i in range(num_sequences):
        rng = sequence_rng(seed, i)
        seq_frames, _ = generate_sequence(rng, frames, height, width, num_shapes)
        sequence_id = f"{split}-{i:05d}"
        filename = f"{sequence_id}.seq"
        write_frames(out_dir / filename, seq_frames)
        manifest.entries.append(
            SequenceEntry(sequence_id, filename, frames, 1, height, width))
    manifest.save()
    return manifest


def export_png(frames: np.ndarray, out_dir: str | Path, prefix: str = "frame") -> list[Path]:
    """8-bit PNG export for inspection; quantizes, not part of the data path."""
    from PIL import Image

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for t, frame in enumerate(frames):
        arr = np.clip(frame, 0.0, 1.0)
        arr = (arr * 255.0 + 0.5).astype(np.uint8)
        if arr.shape[0] == 1:
            img = Image.fromarray(arr[0], mode="L")
        else:
            img = Image.fromarray(arr.transpose(1, 2, 0), mode="RGB")
        path = out_dir / f"{prefix}_{t:04d}.png"
        img.save(path)
        paths.append(path)
    return paths
