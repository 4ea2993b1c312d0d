"""Backpropagation through time and Adam ascent on the weighted lower bound."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from .net import (BLOCK_NAMES, LatentTrace, LossBreakdown, NetworkSpec, Parameters, _Blocks,
                  check_meta_prior, init_parameters, kl_term, load_checkpoint, load_checkpoint_extra,
                  lower_bound, reconstruction_term, run_batch, save_checkpoint)
from . import _kernels
from .seqdata import Dataset, DomainError

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "L", "L_z", "L_x", "mean_sigma", "seconds")


@dataclass
class GradientSet(_Blocks):
    """Gradients of the lower bound (ascent direction), one block per parameter block."""

    def check_finite(self) -> None:
        for name in BLOCK_NAMES:
            if not np.isfinite(getattr(self, name)).all():
                raise FloatingPointError(f"non-finite gradient in block {name}")

    def global_norm(self) -> float:
        return math.sqrt(sum(float(np.sum(v * v)) for v in self.blocks().values()))


@dataclass
class TrainingConfig:
    meta_prior_w: float = 0.0
    epochs: int = 1000
    batch_size: int = 8
    alpha: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    seed: int = 0
    gradient_clip: float | None = None
    init_log_var: float = 0.0
    checkpoint_every: int = 0
    learn_init_latents: bool = True
    alpha_half_life: float | None = None  # epochs; None keeps alpha constant
    alpha_decay_start: int = 0

    def alpha_at(self, epoch: int) -> float:
        """Step size for a 0-based absolute epoch: constant, then exponential decay."""
        if not self.alpha_half_life or epoch < self.alpha_decay_start:
            return self.alpha
        return self.alpha * 0.5 ** ((epoch - self.alpha_decay_start) / self.alpha_half_life)

    def validate(self, num_sequences: int | None = None) -> None:
        check_meta_prior(self.meta_prior_w)
        if self.epochs < 1:
            raise DomainError("epochs must be >= 1")
        if self.batch_size < 1:
            raise DomainError("batch_size must be >= 1")
        if num_sequences is not None and self.batch_size > num_sequences:
            raise DomainError(f"batch_size {self.batch_size} exceeds number of sequences {num_sequences}")
        if self.alpha <= 0 or not (0 <= self.beta1 < 1) or not (0 <= self.beta2 < 1):
            raise DomainError("invalid Adam hyper-parameters")
        if self.alpha_half_life is not None and self.alpha_half_life <= 0:
            raise DomainError("alpha_half_life must be positive")


@dataclass
class AdamState:
    m: GradientSet
    v: GradientSet
    timestep: int = 0

    @classmethod
    def zeros_like(cls, params: Parameters) -> "AdamState":
        return cls(GradientSet.zeros_like(params), GradientSet.zeros_like(params), 0)


def backward_batch(trace: LatentTrace, targets: np.ndarray, params: Parameters, spec: NetworkSpec,
                   meta_prior_w: float, compiled: bool | None = None) -> tuple[GradientSet, np.ndarray]:
    """Exact gradients of the summed per-sequence lower bound for a batched trace.

    Returns gradients summed over the batch (``init_latents`` holds one row
    per batch element) and the per-step-and-unit dL/dz_1 rows.
    """
    w = check_meta_prior(meta_prior_w)
    B, T, C = trace.z.shape
    if targets.shape != trace.output.shape:
        raise DomainError(f"target shape {targets.shape} does not match trace output {trace.output.shape}")
    inv_tau = 1.0 / spec.tau
    decay = 1.0 - inv_tau
    kl_scale = w / C

    rec = np.concatenate([params.w_mu_c, params.w_sigma_c], axis=0)  # (2C, C)
    dlogits = (1.0 - w) * (targets - trace.output * targets.sum(axis=-1, keepdims=True))
    dc = dlogits @ params.w_x_c  # (B, T, C)
    c, mu, sigma, eps = trace.c, trace.mu, trace.sigma, trace.eps
    g_pre = np.empty((B, T - 1, 2 * C))

    if _kernels.ENABLED if compiled is None else compiled:
        g_z1 = np.empty((B, C))
        contig = np.ascontiguousarray
        _kernels.backward(contig(dc), contig(c), contig(mu), contig(sigma), contig(eps, dtype=float),
                          contig(rec), decay, inv_tau, kl_scale, g_pre, g_z1)
        return _collect(g_pre, g_z1, dlogits, trace, spec)

    one_minus_c2 = 1.0 - c * c
    kl_sigma = 0.5 * kl_scale * (1.0 - sigma * sigma)  # d L_z / d log sigma^2
    g_mu_next = np.zeros((B, C))
    g_pre_next = None
    for t in range(T - 1, -1, -1):
        gc = dc[:, t]
        if g_pre_next is not None:
            gc = gc + g_pre_next @ rec
        gz = gc * one_minus_c2[:, t] + decay * g_mu_next
        if t == 0:
            g_z1 = gz
            break
        k = t - 1
        g_mu = gz - kl_scale * mu[:, k]
        g_s = kl_sigma[:, k] + 0.5 * gz * eps[:, k] * sigma[:, k]
        g_pre[:, k, :C] = g_mu * inv_tau
        g_pre[:, k, C:] = g_s
        g_pre_next = g_pre[:, k]
        g_mu_next = g_mu
    return _collect(g_pre, g_z1, dlogits, trace, spec)


def _collect(g_pre, g_z1, dlogits, trace, spec):
    C = spec.num_units
    c = trace.c
    flat_pre = g_pre.reshape(-1, 2 * C)
    g_rec = flat_pre.T @ c[:, :-1].reshape(-1, C)
    g_in = flat_pre[:, :C].T @ trace.inputs[:, :-1].reshape(-1, trace.inputs.shape[-1])
    g_out = dlogits.reshape(-1, dlogits.shape[-1]).T @ c.reshape(-1, C)
    masks = spec.masks()
    grads = GradientSet(
        w_mu_c=np.where(masks["w_mu_c"], g_rec[:C], 0.0),
        w_mu_x=np.where(masks["w_mu_x"], g_in, 0.0),
        w_sigma_c=np.where(masks["w_sigma_c"], g_rec[C:], 0.0),
        w_x_c=np.where(masks["w_x_c"], g_out, 0.0),
        b_mu=flat_pre[:, :C].sum(axis=0),
        b_sigma=flat_pre[:, C:].sum(axis=0),
        b_x=dlogits.sum(axis=(0, 1)),
        init_latents=g_z1,
    )
    return grads, g_z1


def backward_sequence(trace: LatentTrace, target, params: Parameters, spec: NetworkSpec,
                      meta_prior_w: float) -> tuple[GradientSet, LossBreakdown]:
    """Gradients of one sequence's lower bound; ``init_latents`` has shape (1, C).

    ``trace`` must come from an open-loop pass on ``target`` with its eps recorded.
    """
    frames = np.asarray(getattr(target, "frames", target), dtype=float)
    if frames.shape[0] != trace.step_count:
        raise DomainError(f"trace length {trace.step_count} != target length {frames.shape[0]}")
    batched = trace if trace.batched else LatentTrace(
        trace.z[None], trace.c[None], trace.output[None], trace.mu[None], trace.sigma[None],
        trace.log_var[None], trace.eps[None], trace.inputs[None])
    grads, _ = backward_batch(batched, frames[None], params, spec, meta_prior_w)
    grads.check_finite()
    return grads, lower_bound(trace, frames, meta_prior_w)


def adam_step(params: Parameters, grads: GradientSet, state: AdamState,
              config: TrainingConfig) -> tuple[Parameters, AdamState]:
    """Bias-corrected Adam step in the ascent direction of the lower bound."""
    grads.check_finite()
    t = state.timestep + 1
    b1, b2 = config.beta1, config.beta2
    bc1, bc2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    new_params = {}
    new_m, new_v = {}, {}
    for name in BLOCK_NAMES:
        g = getattr(grads, name)
        p = getattr(params, name)
        if g.shape != p.shape:
            raise DomainError(f"gradient block {name} has shape {g.shape}, expected {p.shape}")
        m = b1 * getattr(state.m, name) + (1.0 - b1) * g
        v = b2 * getattr(state.v, name) + (1.0 - b2) * (g * g)
        new_params[name] = p + config.alpha * (m / bc1) / (np.sqrt(v / bc2) + config.epsilon)
        new_m[name], new_v[name] = m, v
    return Parameters(**new_params), AdamState(GradientSet(**new_m), GradientSet(**new_v), t)


@dataclass
class EpochRecord:
    epoch: int
    L: float
    L_z: float
    L_x: float
    mean_sigma: float
    seconds: float | None = None


@dataclass
class TrainingResult:
    params: Parameters
    adam: AdamState
    log: list[EpochRecord] = field(default_factory=list)
    clipped_steps: int = 0


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    # per-epoch stream so a resumed run reproduces an uninterrupted one
    return np.random.default_rng([int(seed), int(epoch)])


def fit(inputs: np.ndarray, targets: np.ndarray, spec: NetworkSpec, config: TrainingConfig,
        params: Parameters | None = None, adam: AdamState | None = None, start_epoch: int = 0,
        callbacks: list[Callable] | None = None, timing: bool = False) -> TrainingResult:
    """Mini-batch training on aligned (L, T, M_in) inputs and (L, T, M_out) targets."""
    L, T, _ = inputs.shape
    config.validate(L)
    if targets.shape[:2] != inputs.shape[:2] or targets.shape[2] != spec.output_dim:
        raise DomainError("inputs and targets are not aligned with the network spec")
    if params is None:
        params = init_parameters(spec, L, config.seed, config.init_log_var)
    params.check(spec)
    if params.init_latents.shape[0] != L:
        raise DomainError("init_latents count does not match number of sequences")
    if adam is None:
        adam = AdamState.zeros_like(params)
    result = TrainingResult(params, adam)
    C = spec.num_units
    w = config.meta_prior_w
    t0 = time.perf_counter()
    for epoch in range(start_epoch, start_epoch + config.epochs):
        rng = _epoch_rng(config.seed, epoch)
        step_config = replace(config, alpha=config.alpha_at(epoch)) if config.alpha_half_life else config
        order = rng.permutation(L)
        sums = np.zeros(3)
        sigma_sum = 0.0
        for start in range(0, L, config.batch_size):
            idx = order[start:start + config.batch_size]
            eps = rng.standard_normal((len(idx), T - 1, C))
            p = result.params
            trace = run_batch(p, spec, inputs[idx], p.init_latents[idx], eps)
            lz = kl_term(trace)
            lx = reconstruction_term(trace, targets[idx])
            sums += (np.sum(lz), np.sum(lx), np.sum(w * lz + (1.0 - w) * lx))
            sigma_sum += float(trace.sigma.sum())
            g, g_z1 = backward_batch(trace, targets[idx], p, spec, w)
            z1_grad = np.zeros_like(p.init_latents)
            if config.learn_init_latents:
                z1_grad[idx] = g_z1
            g.init_latents = z1_grad
            for name in BLOCK_NAMES:
                setattr(g, name, getattr(g, name) / len(idx))
            g.check_finite()
            if config.gradient_clip:
                norm = g.global_norm()
                if norm > config.gradient_clip:
                    scale = config.gradient_clip / norm
                    for name in BLOCK_NAMES:
                        setattr(g, name, getattr(g, name) * scale)
                    result.clipped_steps += 1
            result.params, result.adam = adam_step(p, g, result.adam, step_config)
        rec = EpochRecord(epoch + 1, float(sums[2] / L), float(sums[0] / L), float(sums[1] / L),
                          float(sigma_sum / (L * (T - 1) * C)),
                          time.perf_counter() - t0 if timing else None)
        result.log.append(rec)
        for cb in callbacks or ():
            cb(rec, result)
    if result.clipped_steps:
        log.info("gradient clipping applied on %d steps", result.clipped_steps)
    return result


def train(dataset: Dataset, spec: NetworkSpec, config: TrainingConfig, callbacks=None,
          params: Parameters | None = None, adam: AdamState | None = None, start_epoch: int = 0,
          timing: bool = False) -> TrainingResult:
    """Predictive training: each sequence is both the input and the target."""
    if len(dataset) == 0:
        raise DomainError("dataset is empty")
    frames = dataset.frames_array()
    if frames.shape[2] != spec.input_dim:
        raise DomainError(f"dataset frames have {frames.shape[2]} cells, network expects {spec.input_dim}")
    return fit(frames, frames, spec, config, params=params, adam=adam, start_epoch=start_epoch,
               callbacks=callbacks, timing=timing)


def write_training_log(records: list[EpochRecord], path, append: bool = False, extra: dict | None = None) -> Path:
    """CSV log; the ``seconds`` cell is blank unless timing was recorded."""
    path = Path(path)
    extra = extra or {}
    new = not (append and path.exists())
    with path.open("a" if append else "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if new:
            writer.writerow(list(extra) + list(LOG_COLUMNS))
        for r in records:
            row = [r.epoch, repr(float(r.L)), repr(float(r.L_z)), repr(float(r.L_x)), repr(float(r.mean_sigma)),
                   "" if r.seconds is None else f"{r.seconds:.3f}"]
            writer.writerow([str(v) for v in extra.values()] + row)
    return path


def save_training_state(path, params: Parameters, adam: AdamState, spec: NetworkSpec,
                        config: TrainingConfig, epoch: int, metadata: dict | None = None) -> Path:
    """Checkpoint with optimizer moments so training can resume exactly."""
    meta = dict(metadata or {})
    meta.update(epoch=int(epoch), adam_timestep=int(adam.timestep), training=asdict(config))
    extra = {}
    for name in BLOCK_NAMES:
        extra[f"adam_m_{name}"] = getattr(adam.m, name)
        extra[f"adam_v_{name}"] = getattr(adam.v, name)
    return save_checkpoint(path, params, spec, meta, extra)


def load_training_state(path) -> tuple[Parameters, AdamState | None, NetworkSpec, dict]:
    """Inverse of :func:`save_training_state`; adam is None for weight-only checkpoints."""
    params, spec, meta = load_checkpoint(path)
    extra = load_checkpoint_extra(path)
    if not all(f"adam_m_{n}" in extra and f"adam_v_{n}" in extra for n in BLOCK_NAMES):
        return params, None, spec, meta
    m = GradientSet(**{n: extra[f"adam_m_{n}"] for n in BLOCK_NAMES})
    v = GradientSet(**{n: extra[f"adam_v_{n}"] for n in BLOCK_NAMES})
    return params, AdamState(m, v, int(meta.get("adam_timestep", 0))), spec, meta


# -- gradient check -----------------------------------------------------------

def numeric_gradient(fn: Callable[[Parameters], float], params: Parameters, step: float = 1e-5,
                     masks: dict | None = None, order: int = 2) -> GradientSet:
    """Central finite differences of ``fn`` over every (allowed) coordinate.

    ``order`` 2 is the two-point stencil; ``order`` 4 adds the +-2h points,
    which allows a wider step and so far less cancellation error.
    """
    if order not in (2, 4):
        raise DomainError("order must be 2 or 4")
    out = GradientSet.zeros_like(params)
    for name in BLOCK_NAMES:
        base = getattr(params, name)
        grad = getattr(out, name)
        mask = masks.get(name) if masks else None
        for idx in np.ndindex(base.shape):
            if mask is not None and not mask[idx]:
                continue
            orig = base[idx]

            def at(k):
                base[idx] = orig + k * step
                return fn(params)

            if order == 2:
                grad[idx] = (at(1) - at(-1)) / (2.0 * step)
            else:
                grad[idx] = (8.0 * (at(1) - at(-1)) - (at(2) - at(-2))) / (12.0 * step)
            base[idx] = orig
    return out


def _rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    tolerance: float
    seed: int

    @property
    def passed(self) -> bool:
        return all(e <= self.tolerance for e in self.max_rel_error.values())

    def as_dict(self) -> dict:
        return {**asdict(self), "passed": self.passed}


def random_instance(seed: int, layer_sizes=(3, 3), time_constants=(2.0, 4.0), input_dim=4, steps=5,
                    init_log_var: float | None = None, weight_scale: float = 1.0):
    """Random tiny network, target sequence and fixed eps for gradient checks."""
    rng = np.random.default_rng(seed)
    spec = NetworkSpec(layer_sizes, time_constants, input_dim)
    params = init_parameters(spec, 1, int(rng.integers(2**32)))
    masks = spec.masks()
    for name in ("w_mu_c", "w_sigma_c", "w_mu_x", "w_x_c"):
        w = getattr(params, name) * weight_scale
        setattr(params, name, np.where(masks[name], w, 0.0))
    params.b_mu = rng.normal(0, 0.3, params.b_mu.shape)
    params.b_x = rng.normal(0, 0.3, params.b_x.shape)
    params.b_sigma = (rng.normal(-1.0, 0.3, params.b_sigma.shape) if init_log_var is None
                      else np.full(params.b_sigma.shape, float(init_log_var)))
    params.init_latents = rng.normal(0, 0.5, params.init_latents.shape)
    target = rng.dirichlet(np.ones(input_dim), size=steps)
    eps = rng.standard_normal((steps - 1, spec.num_units))
    meta_w = float(rng.uniform(0.05, 0.95))
    return spec, params, target, eps, meta_w


def gradient_check(spec: NetworkSpec | None = None, seed: int = 0, tolerance: float = 1e-5,
                   params: Parameters | None = None, target: np.ndarray | None = None,
                   eps: np.ndarray | None = None, meta_prior_w: float | None = None,
                   step: float = 1e-3, steps: int = 5, order: int = 4) -> GradCheckReport:
    """Compare BPTT gradients with central finite differences on every block.

    Without ``params`` a random instance of ``steps`` steps is built from
    ``seed`` (2 layers unless ``spec`` says otherwise).  The default
    fourth-order stencil keeps the oracle's own error near 1e-12, so tiny
    gradient coordinates are not swamped by cancellation.
    """
    if params is None:
        inst = random_instance(seed, steps=steps) if spec is None else random_instance(
            seed, spec.layer_sizes, spec.time_constants, spec.input_dim, steps)
        spec, params, target, eps, w = inst
        meta_prior_w = w if meta_prior_w is None else meta_prior_w
    params.check(spec)
    target = np.asarray(target, dtype=float)
    if target.ndim != 2 or target.shape[1] != spec.output_dim:
        raise DomainError(f"target shape {target.shape} incompatible with output_dim {spec.output_dim}")
    if eps.shape != (target.shape[0] - 1, spec.num_units):
        raise DomainError(f"eps shape {eps.shape} incompatible with target/spec")
    w = check_meta_prior(0.5 if meta_prior_w is None else meta_prior_w)
    z1 = params.init_latents[0]

    def objective(p: Parameters) -> float:
        trace = run_batch(p, spec, target[None], p.init_latents[:1], eps[None])
        return lower_bound(trace, target[None], w).total

    trace = run_batch(params, spec, target[None], z1[None], eps[None])
    analytic, _ = backward_batch(trace, target[None], params, spec, w)
    numeric = numeric_gradient(objective, params, step, masks=spec.masks(), order=order)
    errors = {name: _rel_error(getattr(analytic, name)[:1] if name == "init_latents" else getattr(analytic, name),
                               getattr(numeric, name)[:1] if name == "init_latents" else getattr(numeric, name))
              for name in BLOCK_NAMES}
    return GradCheckReport(errors, tolerance, seed)
