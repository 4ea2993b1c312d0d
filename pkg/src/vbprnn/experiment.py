"""Glue between the configuration and the library: every step the command
line runs is a function here, so scripts and tests can call it directly."""

from __future__ import annotations

import csv
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .analysis import (NGramCounter, NGramDistribution, DivergenceReport, average_divergence_step,
                       ngram_distribution, ngram_kl)
from .config import RunConfig
from .net import NetworkSpec, Parameters, run_batch
from .pipeline import (LabelSequence, build_classifier, build_target_generator, classify, default_pfsm,
                       default_shapes, free_run, generate_rendered_targets, generate_targets,
                       render_labels, render_stream, sample_labels)
from .seqdata import Dataset, DomainError, GridCodec, Trajectory2D, decode_frames, encode_points
from .train import TrainingConfig, TrainingResult, train

# stream tags for derive_seed; fixed so that outputs never depend on call order
TAG_DATA, TAG_PROTOTYPES, TAG_CLASSIFIER, TAG_REFERENCE, TAG_TRAIN, TAG_REGEN, TAG_FREE = range(1, 8)


def derive_seed(seed: int, *tags: int) -> int:
    """Independent 63-bit seed for a named sub-stream of ``seed``."""
    state = np.random.SeedSequence([int(seed), *map(int, tags)]).generate_state(2, np.uint32)
    return int(state[0]) << 31 | int(state[1]) >> 1


def codec_of(cfg: RunConfig) -> GridCodec:
    return GridCodec(cfg.codec.rows, cfg.codec.cols, cfg.codec.sharpness)


def network_spec(cfg: RunConfig) -> NetworkSpec:
    M = cfg.codec.rows * cfg.codec.cols
    return NetworkSpec(tuple(cfg.network.layer_sizes), tuple(cfg.network.time_constants), M)


def classifier_spec(cfg: RunConfig) -> NetworkSpec:
    M = cfg.codec.rows * cfg.codec.cols
    return NetworkSpec(tuple(cfg.classifier.layer_sizes), tuple(cfg.classifier.time_constants), M, 3)


def shapes_of(cfg: RunConfig):
    return default_shapes(cfg.data.amplitude_jitter, cfg.data.period_jitter)


def nominal_length(cfg: RunConfig) -> float:
    """Steps per prototype instance (three cycles)."""
    return 3.0 * cfg.data.steps_per_cycle


def training_config(cfg: RunConfig, w: float, seed: int) -> TrainingConfig:
    t = cfg.training
    return TrainingConfig(meta_prior_w=w, epochs=t.epochs, batch_size=t.batch_size, alpha=t.alpha,
                          beta1=t.beta1, beta2=t.beta2, epsilon=t.epsilon, seed=seed,
                          gradient_clip=t.gradient_clip, init_log_var=t.init_log_var,
                          checkpoint_every=t.checkpoint_every, alpha_half_life=t.alpha_half_life,
                          alpha_decay_start=t.alpha_decay_start)


# -- synthesis --------------------------------------------------------------------

def render_prototypes(cfg: RunConfig, seed: int, count: int | None = None):
    """A pFSM-labelled concatenation of jittered prototypes (the tablet-data stand-in)."""
    rng = np.random.default_rng(seed)
    labels = sample_labels(default_pfsm(), count or cfg.data.prototypes, rng)
    return render_labels(labels, shapes_of(cfg), cfg.data.steps_per_cycle, rng)


@dataclass
class SynthResult:
    dataset: Dataset
    prototypes: object  # Rendering used to train the target generator (or None)
    targen: TrainingResult | None


def train_target_generator(cfg: RunConfig, rendering) -> TrainingResult:
    codec = codec_of(cfg)
    spec = network_spec(cfg)
    ds = Dataset([rendering.trajectory], codec)
    tcfg = TrainingConfig(meta_prior_w=0.0, epochs=cfg.targen.epochs, batch_size=1, alpha=cfg.targen.alpha,
                          seed=derive_seed(cfg.seed, TAG_PROTOTYPES, 1), init_log_var=cfg.targen.init_log_var)
    return build_target_generator(ds, spec, tcfg)


def synthesize(cfg: RunConfig) -> SynthResult:
    codec = codec_of(cfg)
    d = cfg.data
    seed = derive_seed(cfg.seed, TAG_DATA)
    if d.generator == "renderer":
        ds, _ = generate_rendered_targets(codec, d.total_steps, seed, d.steps_per_cycle, shapes=shapes_of(cfg),
                                          slice_length=d.slice_length, slice_count=d.sequences,
                                          discard_fraction=d.discard_fraction)
        ds.seed = cfg.seed
        return SynthResult(ds, None, None)
    rendering = render_prototypes(cfg, derive_seed(cfg.seed, TAG_PROTOTYPES))
    targen = train_target_generator(cfg, rendering)
    ds, _ = generate_targets(targen.params, network_spec(cfg), codec, d.total_steps, seed,
                             noise_sigma=d.noise_sigma, slice_length=d.slice_length, slice_count=d.sequences,
                             discard_fraction=d.discard_fraction)
    ds.seed = cfg.seed
    return SynthResult(ds, rendering, targen)


def reference_stream(cfg: RunConfig, targen: Parameters | None = None) -> np.ndarray:
    """Long generator stream (decoded points) for the reference N-gram table."""
    seed = derive_seed(cfg.seed, TAG_REFERENCE)
    steps = cfg.analysis.reference_steps
    if cfg.data.generator == "renderer":
        r = render_stream(steps, cfg.data.steps_per_cycle, np.random.default_rng(seed), shapes=shapes_of(cfg))
        return r.trajectory.points
    if targen is None:
        raise DomainError("the target-generator checkpoint is needed for the reference stream")
    spec = network_spec(cfg)
    trace = free_run(targen, spec, steps, np.random.default_rng(seed), init_latent=targen.init_latents[0],
                     noise_sigma=cfg.data.noise_sigma)
    return decode_frames(trace.output, codec_of(cfg))


# -- classifier -------------------------------------------------------------------

def train_classifier(cfg: RunConfig) -> TrainingResult:
    c = cfg.classifier
    rendering = render_prototypes(cfg, derive_seed(cfg.seed, TAG_CLASSIFIER), c.prototypes)
    frames = encode_points(rendering.trajectory.points, codec_of(cfg))
    tcfg = TrainingConfig(epochs=c.epochs, batch_size=c.batch_size, alpha=c.alpha, init_log_var=c.init_log_var,
                          seed=derive_seed(cfg.seed, TAG_CLASSIFIER, 1))
    return build_classifier(frames, rendering.labels, classifier_spec(cfg), tcfg, chunk_length=c.chunk_length)


def label_points(cfg: RunConfig, classifier: Parameters, points: np.ndarray) -> LabelSequence:
    frames = encode_points(np.clip(points, 0.0, 1.0), codec_of(cfg))
    return classify(classifier, classifier_spec(cfg), frames, nominal_length(cfg), cfg.classifier.min_run_fraction)


# -- training -----------------------------------------------------------------------

def condition_seed(seed: int, index: int) -> int:
    return derive_seed(seed, TAG_TRAIN, index)


def _train_job(args):
    cfg, dataset, w, seed = args
    return train(dataset, network_spec(cfg), training_config(cfg, w, seed))


def train_sweep(cfg: RunConfig, dataset: Dataset, w_values=None, threads: int | None = None) -> list[TrainingResult]:
    """One training per W with distinct derived seeds; threads > 1 uses worker processes."""
    w_values = list(cfg.training.w_values if w_values is None else w_values)
    jobs = [(cfg, dataset, w, condition_seed(cfg.seed, i)) for i, w in enumerate(w_values)]
    threads = cfg.threads if threads is None else threads
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(threads, len(jobs))) as pool:
            return list(pool.map(_train_job, jobs))
    return [_train_job(j) for j in jobs]


# -- generation and metrics ------------------------------------------------------------

def regenerate(params: Parameters, spec: NetworkSpec, dataset: Dataset, rng: np.random.Generator,
               eps_scale: float = 1.0) -> np.ndarray:
    """Closed-loop run from every learned z1, seeded with the target's first frame.

    Returns decoded points of shape (L, T, 2).
    """
    X = dataset.frames_array()
    L, T, M = X.shape
    if params.init_latents.shape[0] != L:
        raise DomainError(f"checkpoint holds {params.init_latents.shape[0]} initial states, dataset has {L}")
    eps = eps_scale * rng.standard_normal((L, T - 1, spec.num_units))
    inputs = np.zeros_like(X)
    inputs[:, 0] = X[:, 0]
    trace = run_batch(params, spec, inputs, params.init_latents, eps, closed_loop=True)
    return decode_frames(trace.output.reshape(-1, M), dataset.codec).reshape(L, T, 2)


def divergence(cfg: RunConfig, params: Parameters, spec: NetworkSpec, dataset: Dataset,
               seed: int | None = None) -> tuple[float, list[DivergenceReport]]:
    """ADS averaged over ``analysis.ads_repeats`` stochastic regenerations."""
    seed = cfg.seed if seed is None else seed
    reports = []
    for k in range(cfg.analysis.ads_repeats):
        gen = regenerate(params, spec, dataset, np.random.default_rng(derive_seed(seed, TAG_REGEN, k)))
        pairs = [(t.points, g) for t, g in zip(dataset.raw, gen)]
        reports.append(average_divergence_step(pairs, cfg.analysis.threshold))
    return float(np.mean([r.ads for r in reports])), reports


def free_runs(cfg: RunConfig, params: Parameters, spec: NetworkSpec, seed: int | None = None,
              steps: int | None = None) -> list[np.ndarray]:
    """One closed-loop free-run per learned initial state, decoded to points."""
    seed = cfg.seed if seed is None else seed
    steps = steps or cfg.analysis.free_run_steps
    codec = codec_of(cfg)
    out = []
    for i, z1 in enumerate(params.init_latents):
        trace = free_run(params, spec, steps, np.random.default_rng(derive_seed(seed, TAG_FREE, i)), init_latent=z1)
        out.append(decode_frames(trace.output, codec))
    return out


def pooled_ngrams(cfg: RunConfig, classifier: Parameters, runs: list[np.ndarray]) -> tuple[NGramDistribution, list[LabelSequence]]:
    """N-gram table pooled over several runs (no N-grams span two runs)."""
    counts = NGramCounter(cfg.analysis.ngram).counts
    labels = []
    for pts in runs:
        ls = label_points(cfg, classifier, pts)
        labels.append(ls)
        counts.update(NGramCounter(cfg.analysis.ngram).update(ls.compressed).counts)
    return NGramDistribution(cfg.analysis.ngram, dict(counts), cfg.analysis.epsilon), labels


def reference_ngrams(cfg: RunConfig, classifier: Parameters, stream: np.ndarray) -> NGramDistribution:
    return ngram_distribution(label_points(cfg, classifier, stream), cfg.analysis.ngram, cfg.analysis.epsilon)


@dataclass
class ConditionMetrics:
    w: float
    ads: float
    kl: float
    kl_reverse: float
    mean_sigma: float
    model: NGramDistribution


def evaluate(cfg: RunConfig, params: Parameters, spec: NetworkSpec, dataset: Dataset, classifier: Parameters,
             reference: NGramDistribution, w: float, seed: int | None = None) -> ConditionMetrics:
    ads, _ = divergence(cfg, params, spec, dataset, seed)
    model, _ = pooled_ngrams(cfg, classifier, free_runs(cfg, params, spec, seed))
    X = dataset.frames_array()
    eps = np.zeros((len(X), X.shape[1] - 1, spec.num_units))
    sigma = float(run_batch(params, spec, X, params.init_latents, eps).sigma.mean())
    return ConditionMetrics(w, ads, ngram_kl(reference, model), ngram_kl(model, reference), sigma, model)


def write_table(path, metrics: list[ConditionMetrics]) -> Path:
    """Metric rows by W columns; KL in nats, direction reference || model."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["metric"] + [f"W={m.w!r}" for m in metrics])
        w.writerow(["ADS"] + [repr(m.ads) for m in metrics])
        w.writerow(["Tri-gram KL (nats, reference||model)" if metrics and metrics[0].model.n == 3
                    else "N-gram KL (nats, reference||model)"] + [repr(m.kl) for m in metrics])
    return path


def write_points_csv(path, runs: list[np.ndarray], labels: list[LabelSequence] | None = None) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sequence", "step", "x", "y"] + (["label"] if labels else []))
        for i, pts in enumerate(runs):
            for t, (x, y) in enumerate(np.asarray(pts).tolist(), 1):
                w.writerow([i, t, repr(x), repr(y)] + ([labels[i].steps[t - 1]] if labels else []))
    return path


def read_points_csv(path) -> list[np.ndarray]:
    path = Path(path)
    runs: dict[int, list] = {}
    try:
        with path.open(newline="") as fh:
            reader = csv.DictReader(fh)
            for n, row in enumerate(reader, 2):
                try:
                    runs.setdefault(int(row["sequence"]), []).append((float(row["x"]), float(row["y"])))
                except (KeyError, TypeError, ValueError):
                    raise DomainError(f"{path}: line {n}: expected sequence,step,x,y columns") from None
    except OSError as exc:
        raise DomainError(f"{path}: cannot read ({exc.strerror})") from None
    return [Trajectory2D(np.array(runs[k])).points for k in sorted(runs)]
