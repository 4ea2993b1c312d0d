"""2-D trajectories, the grid softmax codec and the dataset text format.

Patterns live in the unit square.  A point is encoded as a single softmax
over the ``rows x cols`` grid-cell centres with logits
``-sharpness * |p - centre|^2`` and decoded as the probability-weighted mean
of the centres.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

FORMAT_VERSION = "v1"
NORM_TOL = 1e-9


class DomainError(ValueError):
    """Raised when an input violates an operation's precondition."""


class DatasetFormatError(ValueError):
    """Malformed dataset file; message names the line and record index."""


@dataclass(frozen=True)
class GridCodec:
    rows: int = 11
    cols: int = 11
    sharpness: float = 150.0

    def __post_init__(self):
        if self.rows < 2 or self.cols < 2:
            raise DomainError("grid needs at least 2 rows and 2 cols")
        if not self.sharpness > 0:
            raise DomainError("sharpness must be positive")

    @property
    def size(self) -> int:
        return self.rows * self.cols

    @property
    def pitch(self) -> tuple[float, float]:
        """Cell spacing along x (columns) and y (rows)."""
        return 1.0 / (self.cols - 1), 1.0 / (self.rows - 1)

    @property
    def centers(self) -> np.ndarray:
        """(M, 2) array of cell centres; cell index = row * cols + col, x runs along cols."""
        ys, xs = np.meshgrid(np.linspace(0.0, 1.0, self.rows),
                             np.linspace(0.0, 1.0, self.cols), indexing="ij")
        return np.stack([xs.ravel(), ys.ravel()], axis=1)

    def cell_index(self, row: int, col: int) -> int:
        return row * self.cols + col


@dataclass
class Trajectory2D:
    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.size == 0:
            pts = pts.reshape(0, 2)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise DomainError(f"trajectory must have shape (T, 2), got {pts.shape}")
        if pts.size and (pts.min() < 0.0 or pts.max() > 1.0 or not np.isfinite(pts).all()):
            raise DomainError("trajectory coordinates must lie in [0, 1]")
        self.points = pts

    @property
    def step_count(self) -> int:
        return len(self.points)

    def __len__(self):
        return len(self.points)


@dataclass
class EncodedSequence:
    frames: np.ndarray

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=float)
        if frames.ndim != 2:
            raise DomainError(f"frames must have shape (T, M), got {frames.shape}")
        if (frames < 0).any() or np.abs(frames.sum(axis=1) - 1.0).max(initial=0.0) > NORM_TOL:
            raise DomainError("every frame must be a probability vector")
        self.frames = frames

    @property
    def step_count(self) -> int:
        return len(self.frames)

    def __len__(self):
        return len(self.frames)


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def encode_points(points: np.ndarray, codec: GridCodec) -> np.ndarray:
    """Vectorised :func:`encode_point` for an (N, 2) array."""
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts[None, :]
    if pts.shape[-1] != 2:
        raise DomainError("points must be 2-D")
    if pts.size and (pts.min() < 0.0 or pts.max() > 1.0 or not np.isfinite(pts).all()):
        raise DomainError("point coordinates must lie in [0, 1]")
    d2 = ((pts[:, None, :] - codec.centers[None, :, :]) ** 2).sum(axis=-1)
    return _softmax_rows(-codec.sharpness * d2)


def encode_point(p, codec: GridCodec) -> np.ndarray:
    return encode_points(np.asarray(p, dtype=float)[None, :], codec)[0]


def decode_frames(frames: np.ndarray, codec: GridCodec) -> np.ndarray:
    frames = np.atleast_2d(np.asarray(frames, dtype=float))
    if frames.shape[-1] != codec.size:
        raise DomainError(f"frame length {frames.shape[-1]} does not match codec size {codec.size}")
    if np.abs(frames.sum(axis=-1) - 1.0).max() > 1e-6 or (frames < 0).any():
        raise DomainError("frame is not a normalised distribution")
    pts = frames @ codec.centers
    return np.clip(pts, 0.0, 1.0)


def decode_frame(frame, codec: GridCodec) -> np.ndarray:
    return decode_frames(np.asarray(frame)[None, :], codec)[0]


def encode_trajectory(traj: Trajectory2D, codec: GridCodec) -> EncodedSequence:
    if traj.step_count == 0:
        raise DomainError("cannot encode an empty trajectory")
    return EncodedSequence(encode_points(traj.points, codec))


def decode_sequence(seq: EncodedSequence | np.ndarray, codec: GridCodec) -> Trajectory2D:
    frames = seq.frames if isinstance(seq, EncodedSequence) else seq
    return Trajectory2D(decode_frames(frames, codec))


@dataclass
class Dataset:
    raw: list[Trajectory2D]
    codec: GridCodec = field(default_factory=GridCodec)
    seed: int = 0
    metadata: dict[str, str] = field(default_factory=dict)
    sequences: list[EncodedSequence] = field(init=False, repr=False)

    def __post_init__(self):
        self.sequences = [encode_trajectory(t, self.codec) for t in self.raw]

    def __len__(self):
        return len(self.raw)

    def frames_array(self) -> np.ndarray:
        """Stack encoded sequences into (L, T, M); all sequences must share a length."""
        lengths = {len(s) for s in self.sequences}
        if len(lengths) != 1:
            raise DomainError(f"sequences have differing lengths {sorted(lengths)}")
        return np.stack([s.frames for s in self.sequences])


_HEADER_RE = re.compile(
    r"^VBPDATA (?P<version>\S+) rows=(?P<rows>\d+) cols=(?P<cols>\d+) "
    r"sharpness=(?P<sharpness>\S+) seed=(?P<seed>\d+)$")
_META_RE = re.compile(r"^# (?P<key>[A-Za-z0-9_.-]+)=(?P<value>.*)$")


def dumps_dataset(dataset: Dataset) -> str:
    c = dataset.codec
    lines = [f"VBPDATA {FORMAT_VERSION} rows={c.rows} cols={c.cols} "
             f"sharpness={c.sharpness!r} seed={int(dataset.seed)}"]
    for key in sorted(dataset.metadata):
        value = str(dataset.metadata[key])
        if "\n" in value:
            raise DomainError(f"metadata value for {key!r} contains a newline")
        lines.append(f"# {key}={value}")
    for i, traj in enumerate(dataset.raw):
        lines.append(f"SEQ {i} {traj.step_count}")
        lines.extend(f"{x!r} {y!r}" for x, y in traj.points.tolist())
    return "\n".join(lines) + "\n"


def save_dataset(dataset: Dataset, path) -> Path:
    path = Path(path)
    path.write_text(dumps_dataset(dataset))
    return path


def loads_dataset(text: str) -> Dataset:
    lines = text.splitlines()
    if not lines:
        raise DatasetFormatError("line 1: empty file")
    m = _HEADER_RE.match(lines[0])
    if not m:
        raise DatasetFormatError(f"line 1: bad header {lines[0]!r}")
    if m["version"] != FORMAT_VERSION:
        raise DatasetFormatError(f"line 1: unsupported version {m['version']!r}")
    codec = GridCodec(int(m["rows"]), int(m["cols"]), float(m["sharpness"]))
    metadata = {}
    raw = []
    i = 1
    while i < len(lines) and lines[i].startswith("#"):
        mm = _META_RE.match(lines[i])
        if not mm:
            raise DatasetFormatError(f"line {i + 1}: bad metadata line {lines[i]!r}")
        metadata[mm["key"]] = mm["value"]
        i += 1
    while i < len(lines):
        record = len(raw)
        parts = lines[i].split()
        if len(parts) != 3 or parts[0] != "SEQ":
            raise DatasetFormatError(f"line {i + 1}, record {record}: expected 'SEQ <id> <len>'")
        try:
            seq_id, length = int(parts[1]), int(parts[2])
        except ValueError:
            raise DatasetFormatError(f"line {i + 1}, record {record}: bad SEQ fields") from None
        if seq_id != record:
            raise DatasetFormatError(f"line {i + 1}, record {record}: out-of-order id {seq_id}")
        body = lines[i + 1:i + 1 + length]
        if len(body) != length:
            raise DatasetFormatError(
                f"line {i + 1 + len(body)}, record {record}: truncated, "
                f"expected {length} points, found {len(body)}")
        try:
            pts = np.array([[float(v) for v in ln.split()] for ln in body], dtype=float)
            if pts.shape != (length, 2):
                raise ValueError
            raw.append(Trajectory2D(pts.reshape(length, 2)))
        except (ValueError, DomainError):
            raise DatasetFormatError(f"record {record}: bad coordinate lines after line {i + 1}") from None
        i += 1 + length
    return Dataset(raw=raw, codec=codec, seed=int(m["seed"]), metadata=metadata)


def load_dataset(path) -> Dataset:
    path = Path(path)
    try:
        return loads_dataset(path.read_text())
    except DatasetFormatError as exc:
        raise DatasetFormatError(f"{path}: {exc}") from None
