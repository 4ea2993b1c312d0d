"""Synthetic experiment chain: pFSM labels, prototype rendering, target
generation and label classification.

The human tablet recordings are replaced by a renderer that draws three
closed 2-D curves (A, B, C).  Every curve leaves and returns to the same
anchor point, so consecutive prototypes join continuously.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .net import NetworkSpec, Parameters, init_parameters, run_batch
from .seqdata import Dataset, DomainError, GridCodec, Trajectory2D
from .train import TrainingConfig, TrainingResult, fit, train

LABELS = ("A", "B", "C")
WORKSPACE = (0.05, 0.95)


# -- pFSM ---------------------------------------------------------------------

@dataclass
class PFSM:
    """transitions[state] = [(label, next_state, probability), ...]"""

    states: tuple[str, ...]
    transitions: dict[str, list[tuple[str, str, float]]]
    start: str

    def __post_init__(self):
        if self.start not in self.states:
            raise DomainError(f"start state {self.start!r} is not a state")
        for state in self.states:
            edges = self.transitions.get(state)
            if not edges:
                raise DomainError(f"state {state!r} has no outgoing transitions")
            total = sum(p for _, _, p in edges)
            if abs(total - 1.0) > 1e-9:
                raise DomainError(f"transition probabilities of {state!r} sum to {total}")
            for label, nxt, p in edges:
                if label not in LABELS:
                    raise DomainError(f"label {label!r} not in {LABELS}")
                if nxt not in self.states:
                    raise DomainError(f"unknown next state {nxt!r}")
                if p < 0:
                    raise DomainError("negative transition probability")

    def dumps(self) -> str:
        rows = [f"start {self.start}"]
        for state in self.states:
            rows.extend(f"{state} {label} {nxt} {p!r}" for label, nxt, p in self.transitions[state])
        return "\n".join(rows) + "\n"

    @classmethod
    def loads(cls, text: str) -> "PFSM":
        start = None
        transitions: dict[str, list] = {}
        states: list[str] = []
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split()
            if parts[0] == "start" and len(parts) == 2:
                start = parts[1]
                continue
            if len(parts) != 4:
                raise DomainError(f"line {n}: expected 'state label next probability'")
            state, label, nxt = parts[:3]
            try:
                prob = float(parts[3])
            except ValueError:
                raise DomainError(f"line {n}: bad probability {parts[3]!r}") from None
            for s in (state, nxt):
                if s not in states:
                    states.append(s)
            transitions.setdefault(state, []).append((label, nxt, prob))
        if start is None:
            if not states:
                raise DomainError("empty pFSM definition")
            start = states[0]
        return cls(tuple(states), transitions, start)


def default_pfsm() -> PFSM:
    """A, then B, then B (0.3) or C (0.7), repeated: the ABB/ABC triplet grammar."""
    return PFSM(
        states=("S0", "S1", "S2", "S3"),
        transitions={
            "S0": [("A", "S1", 1.0)],
            "S1": [("B", "S2", 1.0)],
            "S2": [("B", "S3", 0.3), ("C", "S3", 0.7)],
            "S3": [("A", "S1", 1.0)],
        },
        start="S0",
    )


def sample_labels(fsm: PFSM, count: int, rng: np.random.Generator) -> list[str]:
    if count < 1:
        raise DomainError("count must be >= 1")
    state = fsm.start
    out = []
    for _ in range(count):
        edges = fsm.transitions[state]
        if len(edges) == 1:
            label, state, _ = edges[0]
        else:
            k = rng.choice(len(edges), p=[p for _, _, p in edges])
            label, state, _ = edges[k]
        out.append(label)
    return out


# -- prototype rendering ------------------------------------------------------

@dataclass(frozen=True)
class PrototypeShape:
    """Closed curve anchor + amp * (sin(freq*phi + phase) - sin(phase)) per axis."""

    label: str
    frequency: tuple[float, float]
    phase: tuple[float, float]
    amplitude: tuple[float, float]
    center: tuple[float, float] = (0.5, 0.5)
    cycles: int = 3
    amplitude_jitter: float = 0.1
    period_jitter: float = 0.1

    def __post_init__(self):
        if self.label not in LABELS:
            raise DomainError(f"unknown label {self.label!r}")
        if self.cycles != 3:
            raise DomainError("prototypes are rendered with 3 cycles")
        for j in (self.amplitude_jitter, self.period_jitter):
            if not 0.0 <= j < 0.5:
                raise DomainError("jitter ranges must lie in [0, 0.5)")

    def curve(self, phi: np.ndarray, amp_scale: float = 1.0) -> np.ndarray:
        f, ph, a = np.asarray(self.frequency), np.asarray(self.phase), np.asarray(self.amplitude)
        offset = a * (np.sin(np.outer(phi, f) + ph) - np.sin(ph))
        return np.asarray(self.center) + amp_scale * offset

    def extent(self) -> tuple[np.ndarray, np.ndarray]:
        phi = np.linspace(0.0, 2.0 * math.pi, 721)
        pts = self.curve(phi, 1.0 + self.amplitude_jitter)
        return pts.min(axis=0), pts.max(axis=0)


def default_shapes(amplitude_jitter: float = 0.1, period_jitter: float = 0.1) -> dict[str, PrototypeShape]:
    """A: circle right of the anchor, B: vertical figure-eight, C: circle left of the anchor."""
    half_pi = math.pi / 2
    common = dict(amplitude_jitter=amplitude_jitter, period_jitter=period_jitter)
    return {
        "A": PrototypeShape("A", (1.0, 1.0), (-half_pi, 0.0), (0.18, 0.18), **common),
        "B": PrototypeShape("B", (2.0, 1.0), (0.0, 0.0), (0.12, 0.28), **common),
        "C": PrototypeShape("C", (1.0, 1.0), (half_pi, math.pi), (0.18, 0.18), **common),
    }


@dataclass
class LabelSequence:
    """Per-step labels plus the prototype-level (compressed) sequence."""

    steps: list[str]
    compressed: list[str] = field(default_factory=list)

    def __post_init__(self):
        for lab in self.compressed:
            if lab not in LABELS:
                raise DomainError(f"unknown label {lab!r}")

    @property
    def compressed_string(self) -> str:
        return "".join(self.compressed)

    def dumps(self) -> str:
        return "".join(f"{lab}\n" for lab in self.steps) + f"# compressed {self.compressed_string}\n"

    @classmethod
    def loads(cls, text: str) -> "LabelSequence":
        steps, compressed = [], None
        for n, line in enumerate(text.splitlines(), 1):
            line = line.strip()
            if line.startswith("# compressed"):
                compressed = list(line[len("# compressed"):].strip())
            elif line:
                if line not in LABELS:
                    raise DomainError(f"line {n}: unknown label {line!r}")
                steps.append(line)
        if compressed is None:
            raise DomainError("label file lacks the '# compressed' trailer")
        return cls(steps, compressed)

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(self.dumps())
        return path


@dataclass
class Rendering:
    trajectory: Trajectory2D
    labels: LabelSequence
    instance_lengths: list[int]


def render_labels(labels: list[str], shapes: dict[str, PrototypeShape], steps_per_cycle: int,
                  rng: np.random.Generator) -> Rendering:
    """Concatenate jittered 3-cycle renderings of each label.

    Each instance draws amplitude and period multipliers uniformly from
    ``1 +- jitter`` and ends exactly on its anchor, so instances join
    without jumps.
    """
    if steps_per_cycle < 3:
        raise DomainError("steps_per_cycle must be >= 3")
    for lab in set(labels):
        if lab not in shapes:
            raise DomainError(f"no prototype shape for label {lab!r}")
    lo, hi = WORKSPACE
    for shape in shapes.values():
        mn, mx = shape.extent()
        if mn.min() < lo - 1e-12 or mx.max() > hi + 1e-12:
            raise DomainError(f"prototype {shape.label} exceeds the workspace [{lo}, {hi}]")
    pieces, step_labels, lengths = [], [], []
    for lab in labels:
        shape = shapes[lab]
        amp = 1.0 + rng.uniform(-shape.amplitude_jitter, shape.amplitude_jitter) if shape.amplitude_jitter else 1.0
        per = 1.0 + rng.uniform(-shape.period_jitter, shape.period_jitter) if shape.period_jitter else 1.0
        n = max(shape.cycles, int(round(shape.cycles * steps_per_cycle * per)))
        phi = 2.0 * math.pi * shape.cycles * np.arange(1, n + 1) / n
        pieces.append(shape.curve(phi, amp))
        step_labels.extend([lab] * n)
        lengths.append(n)
    pts = np.clip(np.concatenate(pieces), lo, hi) if pieces else np.zeros((0, 2))
    return Rendering(Trajectory2D(pts), LabelSequence(step_labels, list(labels)), lengths)


def render_stream(total_steps: int, steps_per_cycle: int, rng: np.random.Generator,
                  fsm: PFSM | None = None, shapes: dict[str, PrototypeShape] | None = None) -> Rendering:
    """pFSM-driven rendering truncated to ``total_steps``."""
    fsm = fsm or default_pfsm()
    shapes = shapes or default_shapes()
    shortest = max(3, int(3 * steps_per_cycle * (1 - max(s.period_jitter for s in shapes.values()))) - 1)
    count = total_steps // shortest + 1
    r = render_labels(sample_labels(fsm, count, rng), shapes, steps_per_cycle, rng)
    kept, acc = [], 0
    for lab, n in zip(r.labels.compressed, r.instance_lengths):
        if acc >= total_steps:
            break
        kept.append(lab)
        acc += n
    return Rendering(Trajectory2D(r.trajectory.points[:total_steps]),
                     LabelSequence(r.labels.steps[:total_steps], kept), r.instance_lengths[:len(kept)])


# -- target generation ----------------------------------------------------------

def slice_stream(points: np.ndarray, slice_length: int, slice_count: int,
                 discard_fraction: float = 0.5) -> list[np.ndarray]:
    """Drop the leading ``discard_fraction`` of a stream and cut consecutive windows."""
    if slice_length < 2 or slice_count < 1:
        raise DomainError("slice_length must be >= 2 and slice_count >= 1")
    start = int(len(points) * discard_fraction)
    available = len(points) - start
    if slice_count * slice_length > available:
        raise DomainError(f"{slice_count} x {slice_length} steps requested but only "
                          f"{available} steps remain after discarding {start}")
    return [points[start + i * slice_length:start + (i + 1) * slice_length] for i in range(slice_count)]


def free_run(params: Parameters, spec: NetworkSpec, steps: int, rng: np.random.Generator,
             init_latent: np.ndarray | None = None, first_frame: np.ndarray | None = None,
             noise_sigma: float | None = None, eps_scale: float = 1.0):
    """Closed-loop generation; returns the LatentTrace.

    The model's own sigma * eps noise is always applied (``eps_scale`` = 0
    gives the mean path); ``noise_sigma`` adds extra N(0, noise_sigma^2) to z.
    """
    if steps < 2:
        raise DomainError("need at least 2 steps")
    C = spec.num_units
    z1 = params.init_latents[0] if init_latent is None else np.asarray(init_latent)
    if first_frame is None:
        first_frame = np.full(spec.input_dim, 1.0 / spec.input_dim)
    inputs = np.zeros((1, steps, spec.input_dim))
    inputs[0, 0] = first_frame
    eps = eps_scale * rng.standard_normal((1, steps - 1, C))
    noise = None
    if noise_sigma:
        noise = noise_sigma * rng.standard_normal((1, steps - 1, C))
    return run_batch(params, spec, inputs, z1[None], eps, closed_loop=True, noise=noise)[0]


def generate_targets(targen: Parameters, spec: NetworkSpec, codec: GridCodec, total_steps: int,
                     seed: int, noise_sigma: float = 0.1, slice_length: int = 400, slice_count: int = 16,
                     discard_fraction: float = 0.5, init_index: int = 0) -> tuple[Dataset, np.ndarray]:
    """Noisy closed-loop stream of the target generator, sliced into a Dataset.

    Returns the dataset and the full decoded stream (for N-gram reference
    statistics).
    """
    if spec.input_dim != codec.size:
        raise DomainError("target generator and codec disagree on the grid size")
    start = int(total_steps * discard_fraction)
    if slice_count * slice_length > total_steps - start:
        raise DomainError(f"insufficient steps: {slice_count} x {slice_length} > {total_steps - start}")
    rng = np.random.default_rng(seed)
    trace = free_run(targen, spec, total_steps, rng, init_latent=targen.init_latents[init_index],
                     noise_sigma=noise_sigma)
    stream = np.clip(trace.output @ codec.centers, 0.0, 1.0)
    windows = slice_stream(stream, slice_length, slice_count, discard_fraction)
    meta = {"generator": "targen-mtrnn", "noise_sigma": repr(noise_sigma), "total_steps": str(total_steps)}
    return Dataset([Trajectory2D(w) for w in windows], codec, seed=seed, metadata=meta), stream


def generate_rendered_targets(codec: GridCodec, total_steps: int, seed: int, steps_per_cycle: int,
                              shapes: dict[str, PrototypeShape] | None = None, fsm: PFSM | None = None,
                              slice_length: int = 400, slice_count: int = 16,
                              discard_fraction: float = 0.5) -> tuple[Dataset, Rendering]:
    """Same slicing as :func:`generate_targets` but over a renderer stream."""
    rng = np.random.default_rng(seed)
    stream = render_stream(total_steps, steps_per_cycle, rng, fsm=fsm, shapes=shapes)
    windows = slice_stream(stream.trajectory.points, slice_length, slice_count, discard_fraction)
    meta = {"generator": "renderer", "steps_per_cycle": str(steps_per_cycle), "total_steps": str(total_steps)}
    return Dataset([Trajectory2D(w) for w in windows], codec, seed=seed, metadata=meta), stream


def build_target_generator(dataset: Dataset, spec: NetworkSpec, config: TrainingConfig) -> TrainingResult:
    """Train the target generator: the VBP core at W = 0."""
    return train(dataset, spec, replace(config, meta_prior_w=0.0))


# -- classifier -------------------------------------------------------------------

def _one_hot(labels: list[str]) -> np.ndarray:
    idx = np.array([LABELS.index(lab) for lab in labels])
    out = np.zeros((len(labels), len(LABELS)))
    out[np.arange(len(labels)), idx] = 1.0
    return out


def classifier_pairs(frames: np.ndarray, labels: list[str], chunk_length: int) -> tuple[np.ndarray, np.ndarray]:
    """Cut an encoded stream and its step labels into aligned training chunks.

    The output at step t has consumed inputs up to t-1, so its target is the
    label of input t-1 (the first step repeats the first label).
    """
    if len(frames) != len(labels):
        raise DomainError("frames and labels are not step-aligned")
    onehot = _one_hot(labels)
    shifted = np.concatenate([onehot[:1], onehot[:-1]])
    n = len(frames) // chunk_length
    if n < 1:
        raise DomainError("stream shorter than one chunk")
    xs = np.stack([frames[i * chunk_length:(i + 1) * chunk_length] for i in range(n)])
    ys = np.stack([shifted[i * chunk_length:(i + 1) * chunk_length] for i in range(n)])
    return xs, ys


def build_classifier(frames: np.ndarray, labels: LabelSequence | list[str], spec: NetworkSpec,
                     config: TrainingConfig, chunk_length: int = 120) -> TrainingResult:
    """Input-driven classifier with a 3-way softmax head, trained at W = 0."""
    steps = labels.steps if isinstance(labels, LabelSequence) else list(labels)
    if spec.output_dim != len(LABELS):
        raise DomainError("classifier needs output_dim == 3")
    xs, ys = classifier_pairs(np.asarray(frames), steps, chunk_length)
    cfg = replace(config, meta_prior_w=0.0, batch_size=min(config.batch_size, len(xs)),
                  learn_init_latents=False)
    params = init_parameters(spec, len(xs), cfg.seed, cfg.init_log_var)
    params.init_latents[:] = 0.0
    return fit(xs, ys, spec, cfg, params=params)


def compress_labels(step_labels: list[str], nominal_length: float, min_run_fraction: float = 0.25) -> list[str]:
    """Prototype-level labels from per-step labels.

    Runs shorter than ``min_run_fraction * nominal_length`` are dropped, equal
    neighbours are merged, and each remaining run contributes
    ``max(1, round(run / nominal_length))`` symbols so that repeated
    prototypes (e.g. the two B's of ABB) stay distinct.
    """
    runs: list[list] = []
    for lab in step_labels:
        if runs and runs[-1][0] == lab:
            runs[-1][1] += 1
        else:
            runs.append([lab, 1])
    min_run = min_run_fraction * nominal_length
    merged: list[list] = []
    for lab, n in runs:
        if n < min_run:
            continue
        if merged and merged[-1][0] == lab:
            merged[-1][1] += n
        else:
            merged.append([lab, n])
    out = []
    for lab, n in merged:
        out.extend([lab] * max(1, int(round(n / nominal_length))))
    return out


def classify(classifier: Parameters, spec: NetworkSpec, frames, nominal_length: float,
             min_run_fraction: float = 0.25) -> LabelSequence:
    """Per-step argmax labels (ties go to the lowest label index) and their compression."""
    frames = np.asarray(getattr(frames, "frames", frames), dtype=float)
    if frames.ndim != 2 or frames.shape[1] != spec.input_dim:
        raise DomainError(f"frames of shape {frames.shape} do not match classifier input {spec.input_dim}")
    padded = np.concatenate([frames, frames[-1:]])
    z1 = classifier.init_latents.mean(axis=0)
    eps = np.zeros((1, len(padded) - 1, spec.num_units))
    out = run_batch(classifier, spec, padded[None], z1[None], eps).output[0, 1:]
    steps = [LABELS[i] for i in np.argmax(out, axis=1)]
    return LabelSequence(steps, compress_labels(steps, nominal_length, min_run_fraction))
