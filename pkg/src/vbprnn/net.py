"""Variational Bayes predictive-coding multiple-timescale RNN.

Every context unit carries a sampled internal state

    z_t = mu_t + sigma_t * eps_t,        eps_t ~ N(0, 1)
    mu_t = (1 - 1/tau) z_{t-1} + (1/tau) (W_mu_c c_{t-1} + W_mu_x x_{t-1} + b_mu)
    sigma_t = exp(0.5 (W_sigma_c c_{t-1} + b_sigma))
    c_t = tanh(z_t)

and the prediction at step t is ``softmax(W_x_c c_t + b_x)``.  The first step
has no posterior: z_1 is a learned per-sequence parameter.  Training
maximises ``W * L_z + (1 - W) * L_x`` where ``L_z`` is the closed-form
negative KL to a unit Gaussian (scaled by 1/(2C), summed over steps 2..T)
and ``L_x`` the summed log-likelihood of the target frames.

Layer k is wired recurrently to layers k-1, k, k+1 (both mean and sigma
paths).  Input enters only the lowest layer's mean and the output reads
only the lowest layer.  Weights are stored as dense matrices whose
disallowed blocks are held at exactly zero.
"""

from __future__ import annotations

import io
import json
import zipfile
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import _kernels
from .seqdata import DomainError

PROB_FLOOR = 1e-12
CHECKPOINT_FORMAT = "vbprnn-checkpoint-1"
BLOCK_NAMES = ("w_mu_c", "w_mu_x", "w_sigma_c", "w_x_c", "b_mu", "b_sigma", "b_x", "init_latents")


@dataclass(frozen=True)
class NetworkSpec:
    layer_sizes: tuple[int, ...]
    time_constants: tuple[float, ...]
    input_dim: int
    output_dim: int | None = None
    connectivity: str = "adjacent"

    def __post_init__(self):
        object.__setattr__(self, "layer_sizes", tuple(int(n) for n in self.layer_sizes))
        object.__setattr__(self, "time_constants", tuple(float(t) for t in self.time_constants))
        if self.output_dim is None:
            object.__setattr__(self, "output_dim", self.input_dim)
        if not self.layer_sizes or min(self.layer_sizes) < 1:
            raise DomainError("layer_sizes must be non-empty positive integers")
        if len(self.layer_sizes) != len(self.time_constants):
            raise DomainError("layer_sizes and time_constants differ in length")
        if min(self.time_constants) < 1.0:
            raise DomainError("time constants must be >= 1")
        if any(b < a for a, b in zip(self.time_constants, self.time_constants[1:])):
            raise DomainError("time constants must be non-decreasing from lowest to highest layer")
        if self.input_dim < 1 or self.output_dim < 1:
            raise DomainError("input_dim and output_dim must be positive")
        if self.connectivity != "adjacent":
            raise DomainError(f"unknown connectivity rule {self.connectivity!r}")

    @property
    def num_units(self) -> int:
        return sum(self.layer_sizes)

    @property
    def layer_slices(self) -> list[slice]:
        bounds = np.cumsum((0,) + self.layer_sizes)
        return [slice(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:])]

    @property
    def tau(self) -> np.ndarray:
        return np.concatenate([np.full(n, t) for n, t in zip(self.layer_sizes, self.time_constants)])

    def recurrent_mask(self) -> np.ndarray:
        C = self.num_units
        mask = np.zeros((C, C), dtype=bool)
        sl = self.layer_slices
        for k, rows in enumerate(sl):
            for j in (k - 1, k, k + 1):
                if 0 <= j < len(sl):
                    mask[rows, sl[j]] = True
        return mask

    def input_mask(self) -> np.ndarray:
        mask = np.zeros((self.num_units, self.input_dim), dtype=bool)
        mask[self.layer_slices[0], :] = True
        return mask

    def output_mask(self) -> np.ndarray:
        mask = np.zeros((self.output_dim, self.num_units), dtype=bool)
        mask[:, self.layer_slices[0]] = True
        return mask

    def masks(self) -> dict[str, np.ndarray]:
        rec = self.recurrent_mask()
        return {"w_mu_c": rec, "w_sigma_c": rec, "w_mu_x": self.input_mask(), "w_x_c": self.output_mask()}

    def to_dict(self) -> dict:
        return {"layer_sizes": list(self.layer_sizes), "time_constants": list(self.time_constants),
                "input_dim": self.input_dim, "output_dim": self.output_dim,
                "connectivity": self.connectivity}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(tuple(d["layer_sizes"]), tuple(d["time_constants"]), int(d["input_dim"]),
                   int(d["output_dim"]), d.get("connectivity", "adjacent"))


@dataclass
class _Blocks:
    w_mu_c: np.ndarray
    w_mu_x: np.ndarray
    w_sigma_c: np.ndarray
    w_x_c: np.ndarray
    b_mu: np.ndarray
    b_sigma: np.ndarray
    b_x: np.ndarray
    init_latents: np.ndarray

    def blocks(self) -> dict[str, np.ndarray]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def copy(self):
        return type(self)(**{k: v.copy() for k, v in self.blocks().items()})

    @classmethod
    def zeros_like(cls, other: "_Blocks"):
        return cls(**{k: np.zeros_like(v) for k, v in other.blocks().items()})


@dataclass
class Parameters(_Blocks):
    """All learnable blocks: connectivity weights, biases and per-sequence z_1."""

    def check(self, spec: NetworkSpec) -> None:
        C, Mi, Mo = spec.num_units, spec.input_dim, spec.output_dim
        expected = {"w_mu_c": (C, C), "w_mu_x": (C, Mi), "w_sigma_c": (C, C), "w_x_c": (Mo, C),
                    "b_mu": (C,), "b_sigma": (C,), "b_x": (Mo,)}
        for name, shape in expected.items():
            if getattr(self, name).shape != shape:
                raise DomainError(f"{name} has shape {getattr(self, name).shape}, expected {shape}")
        if self.init_latents.ndim != 2 or self.init_latents.shape[1] != C:
            raise DomainError(f"init_latents has shape {self.init_latents.shape}, expected (L, {C})")
        for name, mask in spec.masks().items():
            if np.any(getattr(self, name)[~mask] != 0.0):
                raise DomainError(f"{name} has non-zero entries outside the connectivity rule")


def init_parameters(spec: NetworkSpec, num_sequences: int, seed: int,
                    init_log_var: float = 0.0) -> Parameters:
    """Uniform(+-1/sqrt(fan_in)) weights, zero biases, z_1 ~ N(0, 0.01).

    ``init_log_var`` sets b_sigma; the default 0 gives sigma = 1 with zero
    sigma-weights.
    """
    if num_sequences < 1:
        raise DomainError("num_sequences must be >= 1")
    rng = np.random.default_rng(seed)
    C = spec.num_units
    masks = spec.masks()

    def uniform(name, shape):
        mask = masks[name]
        fan_in = np.maximum(mask.sum(axis=1, keepdims=True), 1)
        w = rng.uniform(-1.0, 1.0, size=shape) / np.sqrt(fan_in)
        return np.where(mask, w, 0.0)

    return Parameters(
        w_mu_c=uniform("w_mu_c", (C, C)),
        w_mu_x=uniform("w_mu_x", (C, spec.input_dim)),
        w_sigma_c=uniform("w_sigma_c", (C, C)),
        w_x_c=uniform("w_x_c", (spec.output_dim, C)),
        b_mu=np.zeros(C),
        b_sigma=np.full(C, float(init_log_var)),
        b_x=np.zeros(spec.output_dim),
        init_latents=rng.normal(0.0, 0.1, size=(num_sequences, C)),
    )


@dataclass
class LatentTrace:
    """Forward-pass record.

    ``z``, ``c`` and ``output`` cover steps 1..T.  ``mu``, ``sigma``,
    ``log_var`` (the sigma pre-activation, log sigma^2) and ``eps`` cover
    steps 2..T only, so they are one row shorter.  Arrays may carry a
    leading batch axis.
    """

    z: np.ndarray
    c: np.ndarray
    output: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    log_var: np.ndarray
    eps: np.ndarray
    inputs: np.ndarray
    noise: np.ndarray | None = None
    clamp_count: int = field(default=0)

    @property
    def step_count(self) -> int:
        return self.z.shape[-2]

    @property
    def batched(self) -> bool:
        return self.z.ndim == 3

    def __getitem__(self, i) -> "LatentTrace":
        if not self.batched:
            raise TypeError("trace is not batched")
        return LatentTrace(self.z[i], self.c[i], self.output[i], self.mu[i], self.sigma[i],
                           self.log_var[i], self.eps[i], self.inputs[i],
                           None if self.noise is None else self.noise[i])


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def output_distribution(c_lowest: np.ndarray, params: Parameters, spec: NetworkSpec | None = None) -> np.ndarray:
    """Softmax prediction from lowest-layer activations.

    ``c_lowest`` may be the lowest layer alone or the full context vector.
    """
    w = params.w_x_c
    if c_lowest.shape[-1] != w.shape[1]:
        n0 = c_lowest.shape[-1]
        w = w[:, :n0]
    return softmax(c_lowest @ w.T + params.b_x)


def step_dynamics(prev_z, prev_c, prev_input_frame, eps, params: Parameters, spec: NetworkSpec):
    """One update of every context unit; returns (mu, sigma, z, c)."""
    inv_tau = 1.0 / spec.tau
    drive = prev_c @ params.w_mu_c.T + prev_input_frame @ params.w_mu_x.T + params.b_mu
    mu = (1.0 - inv_tau) * prev_z + inv_tau * drive
    sigma = np.exp(0.5 * (prev_c @ params.w_sigma_c.T + params.b_sigma))
    z = mu + sigma * eps
    return mu, sigma, z, np.tanh(z)


def run_batch(params: Parameters, spec: NetworkSpec, inputs: np.ndarray, z1: np.ndarray,
              eps: np.ndarray, closed_loop: bool = False, noise: np.ndarray | None = None,
              compiled: bool | None = None) -> LatentTrace:
    """Vectorised forward pass over a batch.

    inputs: (B, T, M_in).  In closed loop only ``inputs[:, 0]`` is read and
    the prediction of step t-1 is fed as the input of step t from t = 3.
    eps: (B, T-1, C) noise for steps 2..T.  noise: optional (B, T-1, C)
    additive perturbation of z (already scaled).
    """
    B, T, _ = inputs.shape
    C = spec.num_units
    if T < 2:
        raise DomainError("sequence length must be >= 2")
    if closed_loop and spec.input_dim != spec.output_dim:
        raise DomainError("closed-loop generation needs input_dim == output_dim")
    inv_tau = 1.0 / spec.tau
    decay = 1.0 - inv_tau
    rec = np.concatenate([params.w_mu_c, params.w_sigma_c], axis=0).T  # (C, 2C)
    wx = params.w_mu_x.T
    wo = params.w_x_c.T

    z = np.empty((B, T, C))
    c = np.empty((B, T, C))
    mu = np.empty((B, T - 1, C))
    log_var = np.empty((B, T - 1, C))
    used_inputs = np.empty_like(inputs) if closed_loop else inputs
    z[:, 0] = z1
    c[:, 0] = np.tanh(z1)
    if closed_loop:
        out = np.empty((B, T, spec.output_dim))
        out[:, 0] = softmax(c[:, 0] @ wo + params.b_x)
        used_inputs[:, 0] = inputs[:, 0]
    else:
        drive_x = inputs[:, :-1] @ wx + params.b_mu
        if noise is None and (_kernels.ENABLED if compiled is None else compiled):
            _kernels.forward_open(np.ascontiguousarray(z1, dtype=float), np.ascontiguousarray(drive_x),
                                  np.ascontiguousarray(rec), params.b_sigma, decay, inv_tau,
                                  np.ascontiguousarray(eps, dtype=float), z, c, mu, log_var)
            out = softmax(c @ wo + params.b_x)
            return LatentTrace(z=z, c=c, output=out, mu=mu, sigma=np.exp(0.5 * log_var),
                               log_var=log_var, eps=eps, inputs=used_inputs, noise=None)

    for t in range(1, T):
        pre = c[:, t - 1] @ rec
        if closed_loop:
            x_prev = used_inputs[:, t - 1]
            a = pre[:, :C] + x_prev @ wx + params.b_mu
        else:
            a = pre[:, :C] + drive_x[:, t - 1]
        m = decay * z[:, t - 1] + inv_tau * a
        s = pre[:, C:] + params.b_sigma
        zt = m + np.exp(0.5 * s) * eps[:, t - 1]
        if noise is not None:
            zt = zt + noise[:, t - 1]
        mu[:, t - 1] = m
        log_var[:, t - 1] = s
        z[:, t] = zt
        c[:, t] = np.tanh(zt)
        if closed_loop:
            out[:, t] = softmax(c[:, t] @ wo + params.b_x)
            used_inputs[:, t] = out[:, t]
    if not closed_loop:
        out = softmax(c @ wo + params.b_x)
    return LatentTrace(z=z, c=c, output=out, mu=mu, sigma=np.exp(0.5 * log_var), log_var=log_var,
                       eps=eps, inputs=used_inputs, noise=noise)


def forward_sequence(seq, init_latent: np.ndarray, params: Parameters, spec: NetworkSpec,
                     mode: str = "open_loop", rng: np.random.Generator | None = None,
                     noise_override: float | None = None, eps: np.ndarray | None = None) -> LatentTrace:
    """Forward pass for one sequence.

    ``seq`` is an EncodedSequence or a (T, M) frame array; in closed loop it
    supplies the length and the first input frame.  Fresh eps ~ N(0, 1) is
    drawn from ``rng`` unless given explicitly.  ``noise_override`` adds
    N(0, noise_override^2) to every z from step 2.
    """
    frames = np.asarray(getattr(seq, "frames", seq), dtype=float)
    if mode not in ("open_loop", "closed_loop"):
        raise DomainError(f"unknown mode {mode!r}")
    T = frames.shape[0]
    if T < 2:
        raise DomainError("sequence length must be >= 2")
    C = spec.num_units
    if eps is None:
        if rng is None:
            raise DomainError("either rng or eps must be supplied")
        eps = rng.standard_normal((T - 1, C))
    noise = None
    if noise_override is not None and noise_override > 0:
        if rng is None:
            raise DomainError("noise_override needs an rng")
        noise = noise_override * rng.standard_normal((T - 1, C))
    tr = run_batch(params, spec, frames[None], np.asarray(init_latent)[None], np.asarray(eps)[None],
                   closed_loop=(mode == "closed_loop"), noise=None if noise is None else noise[None])
    return tr[0]


def kl_term(trace: LatentTrace):
    """Closed-form -KL(N(mu, sigma^2) || N(0, 1)) scaled by 1/(2C), summed over steps 2..T.

    Returns a float, or a per-sequence array for a batched trace.
    """
    if np.any(trace.sigma <= 0):
        raise FloatingPointError("non-positive sigma in trace")
    C = trace.mu.shape[-1]
    terms = 1.0 + trace.log_var - trace.mu ** 2 - trace.sigma ** 2
    total = terms.sum(axis=(-2, -1)) / (2.0 * C)
    return float(total) if np.ndim(total) == 0 else total


def reconstruction_term(trace: LatentTrace, target, return_clamps: bool = False):
    """Sum over steps and cells of target * log(prediction), floored at 1e-12."""
    frames = np.asarray(getattr(target, "frames", target), dtype=float)
    if frames.shape != trace.output.shape:
        raise DomainError(f"target shape {frames.shape} does not match output {trace.output.shape}")
    clamped = (trace.output < PROB_FLOOR) & (frames > 0)
    trace.clamp_count = int(clamped.sum())
    logp = np.log(np.maximum(trace.output, PROB_FLOOR))
    total = (frames * logp).sum(axis=(-2, -1))
    total = float(total) if np.ndim(total) == 0 else total
    if return_clamps:
        return total, trace.clamp_count
    return total


@dataclass
class LossBreakdown:
    l_z: float
    l_x: float
    total: float
    meta_prior_w: float


def check_meta_prior(w: float) -> float:
    w = float(w)
    if not 0.0 <= w <= 1.0:
        raise DomainError(f"meta-prior W must lie in [0, 1], got {w}")
    return w


def lower_bound(trace: LatentTrace, target, meta_prior_w: float) -> LossBreakdown:
    w = check_meta_prior(meta_prior_w)
    lz = kl_term(trace)
    lx = reconstruction_term(trace, target)
    if trace.batched:
        lz, lx = float(np.sum(lz)), float(np.sum(lx))
    return LossBreakdown(l_z=lz, l_x=lx, total=w * lz + (1.0 - w) * lx, meta_prior_w=w)


# -- checkpoints -------------------------------------------------------------
#
# A checkpoint is a zip archive (readable with numpy.load) holding one .npy
# member per parameter block plus ``meta.json`` with the network spec and
# free-form metadata (seed lineage, training config).  Member timestamps are
# fixed so identical content gives identical bytes.

_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def _write_member(zf: zipfile.ZipFile, name: str, payload: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, payload)


def _write_array(zf: zipfile.ZipFile, name: str, arr: np.ndarray) -> None:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(arr, dtype=np.float64), allow_pickle=False)
    _write_member(zf, f"{name}.npy", buf.getvalue())


def save_checkpoint(path, params: Parameters, spec: NetworkSpec, metadata: dict | None = None,
                    extra: dict[str, np.ndarray] | None = None) -> Path:
    """Zip of .npy members plus meta.json; fixed timestamps keep it byte-stable.

    ``extra`` arrays (e.g. optimizer moments) are stored under ``extra/``.
    """
    path = Path(path)
    meta = {"format": CHECKPOINT_FORMAT, "spec": spec.to_dict(), "metadata": metadata or {},
            "extra": sorted(extra or {})}
    with zipfile.ZipFile(path, "w") as zf:
        _write_member(zf, "meta.json", json.dumps(meta, sort_keys=True, indent=1).encode())
        for name, arr in params.blocks().items():
            _write_array(zf, name, arr)
        for name in sorted(extra or {}):
            _write_array(zf, f"extra/{name}", extra[name])
    return path


def load_checkpoint_extra(path) -> dict[str, np.ndarray]:
    path = Path(path)
    with zipfile.ZipFile(path) as zf:
        names = json.loads(zf.read("meta.json")).get("extra", [])
        return {n: np.lib.format.read_array(io.BytesIO(zf.read(f"extra/{n}.npy")), allow_pickle=False)
                for n in names}


def load_checkpoint(path) -> tuple[Parameters, NetworkSpec, dict]:
    path = Path(path)
    try:
        zf = zipfile.ZipFile(path)
    except (OSError, zipfile.BadZipFile) as exc:
        raise DomainError(f"{path}: not a readable checkpoint ({exc})") from None
    with zf:
        meta = json.loads(zf.read("meta.json"))
        if meta.get("format") != CHECKPOINT_FORMAT:
            raise DomainError(f"{path}: unsupported checkpoint format {meta.get('format')!r}")
        blocks = {}
        for name in BLOCK_NAMES:
            with zf.open(f"{name}.npy") as fh:
                blocks[name] = np.lib.format.read_array(io.BytesIO(fh.read()), allow_pickle=False)
    spec = NetworkSpec.from_dict(meta["spec"])
    params = Parameters(**blocks)
    params.check(spec)
    return params, spec, meta["metadata"]
