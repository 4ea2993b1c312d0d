"""Acceptance criteria 1-10; each test records a one-line PASS/FAIL verdict.

Criteria 3-6 share one desk-scale sweep (3 master seeds x 4 meta-prior
values); it takes roughly two hours on a single core.
"""

import csv
import json
import math
import time
from collections import Counter
from pathlib import Path

import mpmath
import numpy as np
import pytest
import yaml
from conftest import DESK_SEEDS, record

from vbprnn import experiment as ex
from vbprnn.analysis import NGramDistribution, divergence_step, ngram_distribution, ngram_kl
from vbprnn.cli import main
from vbprnn.config import load_config
from vbprnn.net import NetworkSpec, kl_term, load_checkpoint
from vbprnn.pipeline import default_pfsm, sample_labels
from vbprnn.seqdata import GridCodec, decode_frames, encode_points, load_dataset
from vbprnn.train import gradient_check

from test_cli import TINY
from test_net import _trace_from

W_VALUES = (0.0, 0.01, 0.1, 0.2)


# -- exact property suites -----------------------------------------------------------------

def test_criterion_01_gradient_check():
    t0 = time.perf_counter()
    worst = 0.0
    for k in range(24):
        rng = np.random.default_rng([2024, k])
        spec = NetworkSpec(tuple(int(v) for v in rng.integers(2, 5, size=2)),
                           (float(rng.integers(1, 4)), float(rng.integers(4, 9))), int(rng.integers(2, 10)))
        rep = gradient_check(spec, seed=k, tolerance=1e-5, meta_prior_w=float(rng.uniform()),
                             steps=int(rng.integers(3, 9)))
        worst = max(worst, max(rep.max_rel_error.values()))
    secs = time.perf_counter() - t0
    ok = worst <= 1e-5 and secs < 60
    assert record(1, ok, f"24 instances, worst relative error {worst:.2e} (<= 1e-5), {secs:.1f} s")


def test_criterion_02_kl_monte_carlo():
    t0 = time.perf_counter()
    rng = np.random.default_rng(99)
    worst = 0.0
    for _ in range(50):
        mu, s = rng.uniform(-2.5, 2.5), rng.uniform(0.1, 2.5)
        z = mu + s * rng.standard_normal(1_000_000)
        f = -0.5 * z ** 2 + 0.5 * ((z - mu) / s) ** 2 + math.log(s)  # log p(z) - log q(z)
        se = f.std() / 1000.0
        worst = max(worst, abs(f.mean() - kl_term(_trace_from([[mu]], [[s]]))) / se)
    secs = time.perf_counter() - t0
    ok = worst <= 3.0 and secs < 60
    assert record(2, ok, f"50 settings, worst deviation {worst:.2f} standard errors (<= 3), {secs:.1f} s")


def test_criterion_07_pfsm_fidelity():
    labels = sample_labels(default_pfsm(), 30_000, np.random.default_rng(7))
    trip = Counter("".join(labels[i:i + 3]) for i in range(0, 30_000, 3))
    freq = trip["ABC"] / 10_000
    ok = abs(freq - 0.7) <= 0.02 and set(trip) <= {"ABB", "ABC"}
    assert record(7, ok, f"ABC frequency {freq:.4f} over 10000 triplets (0.70 +- 0.02)")


def test_criterion_08_codec_round_trip():
    worst_ratio = 0.0
    for codec in (GridCodec(), GridCodec(9, 9, 150.0)):
        pts = np.random.default_rng(8).uniform(0.0, 1.0, size=(10_000, 2))
        err = np.abs(decode_frames(encode_points(pts, codec), codec) - pts).max()
        worst_ratio = max(worst_ratio, err / (0.5 * min(codec.pitch)))
    assert record(8, worst_ratio <= 1.0, f"max error / half pitch = {worst_ratio:.3f} (<= 1)")


def _files(d: Path) -> dict:
    return {str(p.relative_to(d)): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def test_criterion_09_determinism(tmp_path):
    cfg = tmp_path / "tiny.yaml"
    cfg.write_text(yaml.safe_dump(TINY))
    outs = []
    for k in range(2):
        out = tmp_path / f"r{k}"
        common = ["--config", str(cfg), "--seed", "5", "--threads", "1"]
        assert main(["run", *common, "--out", str(out)]) == 0
        assert main(["generate", *common, "--checkpoint", str(out / "model_w0.1.ckpt"),
                     "--dataset", str(out / "dataset.txt"), "--out", str(out / "gen")]) == 0
        assert main(["generate", *common, "--checkpoint", str(out / "model_w0.0.ckpt"), "--mode", "free",
                     "--steps", "50", "--out", str(out / "free")]) == 0
        assert main(["classify", *common, "--classifier", str(out / "classifier.ckpt"),
                     "--input", str(out / "free" / "generated.csv"), "--out", str(out / "labels")]) == 0
        assert main(["gradcheck", "--seed", "5", "--instances", "3", "--out", str(out / "grad")]) == 0
        outs.append(_files(out))
    differing = [k for k in outs[0] if outs[0][k] != outs[1].get(k)]
    ok = not differing and outs[0].keys() == outs[1].keys()
    assert record(9, ok, f"{len(outs[0])} output files over run/generate/classify/gradcheck, "
                         f"{len(differing)} differ")


def _mp_kl(p, q):
    with mpmath.workdps(60):
        return float(mpmath.fsum(mpmath.mpf(float(a)) * mpmath.log(mpmath.mpf(float(a)) / mpmath.mpf(float(b)))
                                 for a, b in zip(p, q)))


def test_criterion_10_ngram_kl_oracle():
    rng = np.random.default_rng(10)
    worst = 0.0
    for _ in range(100):
        p = NGramDistribution(3, {tuple(t): int(c) for t, c in
                                  zip(rng.choice(list("ABC"), size=(30, 3)), rng.integers(1, 100, 30))}, 1e-6)
        q = NGramDistribution(3, {tuple(t): int(c) for t, c in
                                  zip(rng.choice(list("ABC"), size=(30, 3)), rng.integers(1, 100, 30))}, 1e-6)
        worst = max(worst, abs(ngram_kl(p, q) - _mp_kl(p.probs, q.probs)))
    d = ngram_distribution(list("ABBABCABCABBABC"), 3)
    ok = worst <= 1e-12 and ngram_kl(d, d) == 0.0
    assert record(10, ok, f"100 pairs, worst |KL - oracle| {worst:.1e} (<= 1e-12); identical inputs give 0")


# -- desk-scale reproductions ------------------------------------------------------------

def _table(run: Path) -> dict[str, list[float]]:
    with (run / "analysis" / "table.csv").open() as fh:
        rows = list(csv.reader(fh))
    assert rows[0][1:] == [f"W={w!r}" for w in W_VALUES]
    return {r[0].split(" (")[0]: [float(v) for v in r[1:]] for r in rows[1:]}


def _details(run: Path) -> dict[float, dict[str, float]]:
    with (run / "analysis" / "details.csv").open() as fh:
        return {float(r["W"]): {k: float(v) for k, v in r.items() if k not in ("W", "log_base")}
                for r in csv.DictReader(fh)}


def _regeneration_steps(run: Path, seed: int, w: float) -> tuple[list[int | None], int]:
    cfg = load_config(run / "config.json")
    dataset = load_dataset(run / "dataset.txt")
    params, spec, _ = load_checkpoint(run / f"w{w!r}" / f"model_w{w!r}.ckpt")
    gen = ex.regenerate(params, spec, dataset, np.random.default_rng(ex.derive_seed(seed, ex.TAG_REGEN, 0)))
    steps = [divergence_step(t.points, g, cfg.analysis.threshold) for t, g in zip(dataset.raw, gen)]
    return steps, len(dataset.raw)


def _train_seconds(run: Path, w: float) -> float:
    return json.loads((run / "timings.json").read_text())[repr(w)]


@pytest.mark.slow
def test_criterion_03_deterministic_regime(desk_sweep):
    run = desk_sweep[0]
    sigma = _details(run)[0.0]["mean_sigma"]
    steps, n = _regeneration_steps(run, 0, 0.0)
    full = sum(s is None for s in steps)
    secs = _train_seconds(run, 0.0)
    ok = sigma < 0.05 and full >= 6 and secs < 1800
    shown = ["full" if s is None else s for s in steps]
    assert record(3, ok, f"W=0: mean sigma {sigma:.4f} (< 0.05), {full}/{n} regenerated to full length (>= 6), "
                         f"steps {shown}, training {secs / 60:.1f} min")


@pytest.mark.slow
def test_criterion_04_stochastic_regime(desk_sweep):
    run = desk_sweep[0]
    sigma = _details(run)[0.01]["mean_sigma"]
    steps, n = _regeneration_steps(run, 0, 0.01)
    early = sum(s is not None for s in steps)
    secs = _train_seconds(run, 0.01)
    ok = 0.01 < sigma < 0.5 and early >= 1 and secs < 1800
    shown = ["full" if s is None else s for s in steps]
    assert record(4, ok, f"W=0.01: mean sigma {sigma:.4f} in (0.01, 0.5), {early}/{n} diverge early (>= 1), "
                         f"steps {shown}, training {secs / 60:.1f} min")


@pytest.mark.slow
def test_criterion_05_ads_trend(desk_sweep):
    per_seed = np.array([_table(desk_sweep[s])["ADS"] for s in DESK_SEEDS])
    med = np.median(per_seed, axis=0)
    ok = bool(np.all(np.diff(med) < 0))
    rows = "; ".join(f"seed {s}: {np.round(r, 1).tolist()}" for s, r in zip(DESK_SEEDS, per_seed))
    assert record(5, ok, f"median ADS over W {list(W_VALUES)}: {np.round(med, 1).tolist()} "
                         f"(strictly decreasing) [{rows}]")


@pytest.mark.slow
def test_criterion_06_trigram_u_shape(desk_sweep):
    per_seed = np.array([_table(desk_sweep[s])["Tri-gram KL"] for s in DESK_SEEDS])
    interior = [int(np.argmin(r)) in (1, 2) for r in per_seed]
    ok = sum(interior) >= 2
    rows = "; ".join(f"seed {s}: {np.round(r, 3).tolist()}" for s, r in zip(DESK_SEEDS, per_seed))
    assert record(6, ok, f"interior minimum in {sum(interior)}/3 seeds (>= 2) [{rows}]")
