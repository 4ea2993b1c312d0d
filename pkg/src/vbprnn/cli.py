"""Command line: ``vbprnn <synth|train|generate|classify|analyze|gradcheck|run> ...``"""

from __future__ import annotations

import argparse
import csv
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import experiment as ex
from . import plotting
from .analysis import (layer_units, periodicity_score, sigma_statistics, write_ngram_csv)
from .config import ConfigError, RunConfig, from_dict, load_config, preset
from .net import NetworkSpec, load_checkpoint, run_batch, save_checkpoint
from .seqdata import DatasetFormatError, DomainError, Dataset, load_dataset, save_dataset
from .train import (gradient_check, load_training_state, save_training_state, train,
                    write_training_log)

log = logging.getLogger("vbprnn")


# -- helpers ------------------------------------------------------------------------

def _resolve(args) -> RunConfig:
    cfg = load_config(args.config, base=args.preset) if args.config else preset(args.preset or "paper")
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.threads is not None:
        changes["threads"] = args.threads
    cfg = replace(cfg, **changes)
    if getattr(args, "sequences", None):
        cfg = replace(cfg, data=replace(cfg.data, sequences=args.sequences,
                                        total_steps=max(cfg.data.total_steps,
                                                        int(np.ceil(args.sequences * cfg.data.slice_length
                                                                    / (1 - cfg.data.discard_fraction))))))
    if getattr(args, "epochs", None):
        cfg = replace(cfg, training=replace(cfg.training, epochs=args.epochs))
    return from_dict(cfg.to_dict())


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _model_name(w: float) -> str:
    return f"model_w{w!r}.ckpt"


def _fmt(v) -> str:
    return f"{v:.6g}" if isinstance(v, float) else str(v)


# -- subcommands ------------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = _resolve(args)
    out = _out(args)
    cfg.write(out / "config.json")
    res = ex.synthesize(cfg)
    save_dataset(res.dataset, out / "dataset.txt")
    targen = None
    if res.targen is not None:
        targen = res.targen.params
        save_checkpoint(out / "targen.ckpt", targen, ex.network_spec(cfg), {"role": "target-generator"})
        ex.write_points_csv(out / "prototypes.csv", [res.prototypes.trajectory.points], [res.prototypes.labels])
    ex.write_points_csv(out / "reference.csv", [ex.reference_stream(cfg, targen)])
    print(f"wrote {len(res.dataset)} sequences of {res.dataset.raw[0].step_count} steps to {out / 'dataset.txt'}")
    return 0


def _train_one(cfg: RunConfig, dataset: Dataset, w: float, index: int, out: Path, resume: Path | None):
    spec = ex.network_spec(cfg)
    seed = ex.condition_seed(cfg.seed, index)
    tcfg = ex.training_config(cfg, w, seed)
    params = adam = None
    start = 0
    if resume is not None:
        params, adam, rspec, meta = load_training_state(resume)
        if rspec != spec:
            raise DomainError(f"{resume}: checkpoint network does not match the configuration")
        start = int(meta.get("epoch", 0))
        seed = int(meta.get("training", {}).get("seed", seed))
        tcfg = replace(tcfg, seed=seed)
    path = out / _model_name(w)
    callbacks = []
    if tcfg.checkpoint_every:
        def snapshot(rec, result):
            if rec.epoch % tcfg.checkpoint_every == 0:
                save_training_state(out / f"model_w{w!r}_epoch{rec.epoch}.ckpt", result.params, result.adam,
                                    spec, tcfg, rec.epoch, {"w": w})
        callbacks.append(snapshot)
    res = train(dataset, spec, tcfg, params=params, adam=adam, start_epoch=start, callbacks=callbacks)
    save_training_state(path, res.params, res.adam, spec, tcfg, start + tcfg.epochs, {"w": w})
    return res, path


def cmd_train(args) -> int:
    cfg = _resolve(args)
    out = _out(args)
    dataset = load_dataset(args.dataset)
    configured = list(cfg.training.w_values)
    if args.sweep:
        ws = configured
    else:
        ws = [args.w if args.w is not None else configured[0]]
    # a single-W run uses the seed that W gets inside the configured sweep
    indices = [configured.index(w) if w in configured else len(configured) for w in ws]
    cfg = replace(cfg, training=replace(cfg.training, w_values=ws))
    cfg.write(out / "config.json")
    if args.resume and len(ws) != 1:
        raise DomainError("--resume applies to a single W")
    if cfg.threads > 1 and len(ws) > 1 and not args.resume:
        results = ex.train_sweep(cfg, dataset)
        spec = ex.network_spec(cfg)
        paths = []
        for w, index, res in zip(ws, indices, results):
            tcfg = ex.training_config(cfg, w, ex.condition_seed(cfg.seed, index))
            paths.append(save_training_state(out / _model_name(w), res.params, res.adam, spec, tcfg,
                                             tcfg.epochs, {"w": w}))
    else:
        results, paths = [], []
        for w, index in zip(ws, indices):
            res, path = _train_one(cfg, dataset, w, index, out, Path(args.resume) if args.resume else None)
            results.append(res)
            paths.append(path)
    log_path = out / "training_log.csv"
    for i, (w, res) in enumerate(zip(ws, results)):
        write_training_log(res.log, log_path, append=i > 0, extra={"W": repr(w)})
    plotting.training_figure(out / "training.svg", {f"W={w!r}": r.log for w, r in zip(ws, results)})
    for w, res, path in zip(ws, results, paths):
        last = res.log[-1]
        print(f"W={w!r}: L={_fmt(last.L)} L_x={_fmt(last.L_x)} mean_sigma={_fmt(last.mean_sigma)} -> {path}")
    return 0


def cmd_generate(args) -> int:
    cfg = _resolve(args)
    out = _out(args)
    cfg.write(out / "config.json")
    params, spec, meta = load_checkpoint(args.checkpoint)
    if args.mode == "regenerate":
        if not args.dataset:
            raise DomainError("--mode regenerate needs --dataset")
        dataset = load_dataset(args.dataset)
        gen = ex.regenerate(params, spec, dataset, np.random.default_rng(ex.derive_seed(cfg.seed, ex.TAG_REGEN, 0)))
        runs = list(gen)
    else:
        runs = ex.free_runs(cfg, params, spec, steps=args.steps or cfg.analysis.free_run_steps)
    path = ex.write_points_csv(out / "generated.csv", runs)
    print(f"wrote {len(runs)} runs of {len(runs[0])} steps to {path}")
    return 0


def cmd_classify(args) -> int:
    cfg = _resolve(args)
    out = _out(args)
    cfg.write(out / "config.json")
    if args.classifier:
        classifier, cspec, _ = load_checkpoint(args.classifier)
        if cspec != ex.classifier_spec(cfg):
            raise DomainError(f"{args.classifier}: classifier network does not match the configuration")
    else:
        res = ex.train_classifier(cfg)
        classifier = res.params
        save_checkpoint(out / "classifier.ckpt", classifier, ex.classifier_spec(cfg), {"role": "classifier"})
        print(f"trained classifier -> {out / 'classifier.ckpt'}")
    if args.input:
        runs = ex.read_points_csv(args.input)
        labels = [ex.label_points(cfg, classifier, pts) for pts in runs]
        ex.write_points_csv(out / "labels.csv", runs, labels)
        with (out / "compressed.txt").open("w") as fh:
            for i, ls in enumerate(labels):
                fh.write(f"{i} {ls.compressed_string}\n")
                print(f"sequence {i}: {ls.compressed_string[:60]}{'...' if len(ls.compressed) > 60 else ''}")
    return 0


def cmd_analyze(args) -> int:
    cfg = _resolve(args)
    out = _out(args)
    cfg.write(out / "config.json")
    dataset = load_dataset(args.dataset)
    classifier, cspec, _ = load_checkpoint(args.classifier)
    reference_pts = ex.read_points_csv(args.reference)
    reference = ex.reference_ngrams(cfg, classifier, np.concatenate(reference_pts))
    models = []
    for path in args.checkpoints:
        params, spec, meta = load_checkpoint(path)
        models.append((float(meta.get("w", np.nan)), params, spec))
    models.sort(key=lambda m: m[0])
    metrics, regens, sigmas, period_rows = [], {}, {}, []
    for w, params, spec in models:
        m = ex.evaluate(cfg, params, spec, dataset, classifier, reference, w)
        metrics.append(m)
        regens[f"W={w!r}"] = ex.regenerate(params, spec, dataset,
                                           np.random.default_rng(ex.derive_seed(cfg.seed, ex.TAG_REGEN, 0)))[0]
        X = dataset.frames_array()[:1]
        trace = run_batch(params, spec, X, params.init_latents[:1], np.zeros((1, X.shape[1] - 1, spec.num_units)))
        summary = sigma_statistics(trace[0], layer_units(spec, 0, cfg.analysis.sigma_units))
        sigmas[f"W={w!r}"] = summary.series
        run = ex.free_runs(cfg, params, spec, steps=cfg.analysis.free_run_steps)[0]
        per = periodicity_score(run, min(cfg.analysis.max_lag, (len(run) - 1) // 2))
        period_rows.append([repr(w), per.lag, repr(float(per.peak)), per.flag])
    table = ex.write_table(out / "table.csv", metrics)
    with (out / "details.csv").open("w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["W", "ADS", "kl_reference_model", "kl_model_reference", "mean_sigma", "log_base"])
        for m in metrics:
            wr.writerow([repr(float(v)) for v in (m.w, m.ads, m.kl, m.kl_reverse, m.mean_sigma)] + ["e"])
    with (out / "periodicity.csv").open("w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["W", "lag", "peak", "flag"])
        wr.writerows(period_rows)
    with (out / "sigma.csv").open("w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["W", "step", "unit", "sigma"])
        for name, s in sigmas.items():
            for t, row in enumerate(s.tolist(), 2):
                for u, v in enumerate(row):
                    wr.writerow([name[2:], t, u, repr(v)])
    write_ngram_csv(out / "ngrams.csv", reference, {f"W={m.w!r}": m.model for m in metrics})
    ex.write_points_csv(out / "trajectories.csv", [dataset.raw[0].points] + list(regens.values()))
    plotting.trajectory_figure(out / "trajectories.svg", dataset.raw[0].points, regens)
    plotting.sigma_figure(out / "sigma.svg", sigmas)
    plotting.metric_figure(out / "metrics.svg", [m.w for m in metrics],
                           {"ADS": [m.ads for m in metrics], "Tri-gram KL": [m.kl for m in metrics]})
    print("W        ADS        KL(ref||model) [nats]  mean sigma")
    for m in metrics:
        print(f"{m.w:<8g} {m.ads:<10.2f} {m.kl:<22.6g} {m.mean_sigma:.4g}")
    print(f"table -> {table}")
    return 0


def cmd_gradcheck(args) -> int:
    out = _out(args)
    seed = args.seed or 0
    rows, worst = [], 0.0
    for k in range(args.instances):
        rng = np.random.default_rng([seed, k])
        layers = tuple(int(v) for v in rng.integers(2, 5, size=2))
        spec = NetworkSpec(layers, (float(rng.integers(1, 4)), float(rng.integers(4, 9))),
                           int(rng.integers(2, 10)))
        rep = gradient_check(spec, seed=int(rng.integers(2**31)), tolerance=args.tolerance,
                             meta_prior_w=float(rng.uniform(0, 1)), steps=int(rng.integers(3, 9)))
        err = max(rep.max_rel_error.values())
        worst = max(worst, err)
        rows.append([k, "x".join(map(str, layers)), spec.input_dim, repr(float(err)), "pass" if rep.passed else "fail"])
    with (out / "gradcheck.csv").open("w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["instance", "layers", "input_dim", "max_rel_error", "result"])
        wr.writerows(rows)
    ok = worst <= args.tolerance
    print(f"{args.instances} instances, worst relative error {worst:.3g} "
          f"({'pass' if ok else 'FAIL'} at tolerance {args.tolerance:g})")
    return 0 if ok else 1


def cmd_run(args) -> int:
    """synth, classifier, sweep and analysis into one directory."""
    out = _out(args)
    common = ["--out", str(out)] + (["--config", args.config] if args.config else []) + \
             (["--preset", args.preset] if args.preset else []) + \
             (["--seed", str(args.seed)] if args.seed is not None else []) + \
             (["--threads", str(args.threads)] if args.threads is not None else [])
    steps = [["synth"] + common,
             ["classify"] + common,
             ["train", "--sweep", "--dataset", str(out / "dataset.txt")] + common]
    for argv in steps:
        code = main(argv)
        if code:
            return code
    cfg = load_config(out / "config.json")
    ckpts = [str(out / _model_name(w)) for w in cfg.training.w_values]
    return main(["analyze", "--dataset", str(out / "dataset.txt"), "--classifier", str(out / "classifier.ckpt"),
                 "--reference", str(out / "reference.csv"), "--checkpoints", *ckpts] + common)


# -- parser -----------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vbprnn", description="Variational predictive-coding MTRNN experiments")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="YAML or JSON run configuration")
        sp.add_argument("--preset", choices=["paper", "desk"], help="defaults to start from (default: paper)")
        sp.add_argument("--seed", type=int, help="master seed (non-negative integer)")
        sp.add_argument("--out", default=".", help="output directory")
        sp.add_argument("--threads", type=int, help="worker processes for sweeps (default 1)")
        sp.set_defaults(func=fn)
        return sp

    sp = add("synth", cmd_synth, "synthesize the training dataset and reference stream")
    sp.add_argument("--sequences", type=int, help="number of training sequences")
    sp = add("train", cmd_train, "train one W or the full W sweep")
    sp.add_argument("--dataset", required=True)
    g = sp.add_mutually_exclusive_group()
    g.add_argument("--w", type=float, help="meta-prior W")
    g.add_argument("--sweep", action="store_true", help="train every W in the configuration")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--resume", help="checkpoint to continue from")
    sp = add("generate", cmd_generate, "closed-loop generation from a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--mode", choices=["regenerate", "free"], default="regenerate")
    sp.add_argument("--dataset", help="targets whose first frames seed regeneration")
    sp.add_argument("--steps", type=int, help="free-run length")
    sp = add("classify", cmd_classify, "train the label classifier and/or label trajectories")
    sp.add_argument("--classifier", help="existing classifier checkpoint")
    sp.add_argument("--input", help="points CSV (sequence,step,x,y) to label")
    sp = add("analyze", cmd_analyze, "ADS, N-gram KL, periodicity and sigma reports")
    sp.add_argument("--dataset", required=True)
    sp.add_argument("--classifier", required=True)
    sp.add_argument("--reference", required=True, help="reference stream CSV written by synth")
    sp.add_argument("--checkpoints", nargs="+", required=True)
    sp = add("gradcheck", cmd_gradcheck, "finite-difference check of the BPTT gradients")
    sp.add_argument("--instances", type=int, default=20)
    sp.add_argument("--tolerance", type=float, default=1e-5)
    add("run", cmd_run, "synth, classify, train sweep and analyze in one go")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ConfigError, DatasetFormatError, DomainError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc.filename or ''}: {exc.strerror or exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
