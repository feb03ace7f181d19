"""``macdiff`` command line: one subcommand per pipeline, JSON reports on disk, progress on stderr."""
from __future__ import annotations

import argparse
import csv
import json
import os
import shutil
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, RunConfig, TrainConfig, fingerprint, load_run_config
from .diffusion import build_schedule
from .estimator import MacDiff
from .evaluation import (LinearProbeClassifier, extract_features, finetune, generative_report, mpjpe,
                         semi_supervised_run)
from .model import ModelConfig
from .sampling import build_augmented_set, precompute_conditions, to_model_frames
from .skeleton import (BODY_PARTS, OcclusionSpec, apply_occlusion, compute_stats, load_dataset, save_dataset,
                       synth_dataset)
from .training import grad_check, run_training

EXIT_USAGE = 2
EXIT_FAILURE = 1


class CommandError(RuntimeError):
    pass


def log(msg: str) -> None:
    print(f"[macdiff] {msg}", file=sys.stderr, flush=True)


def _preset(name: str) -> dict:
    train = TrainConfig.tiny() if name == "tiny" else TrainConfig()
    return {"train": train.to_dict()}


def _run_config(args, extra_base: dict | None = None) -> RunConfig:
    base = _preset(args.preset)
    if extra_base:
        for k, v in extra_base.items():
            base["train"]["model"][k] = v
    overrides = list(args.set or [])
    if args.seed is not None:
        overrides.append(f"train.seed={args.seed}")
    return load_run_config(args.config, overrides, base)


def _seed(args, cfg: RunConfig) -> int:
    return args.seed if args.seed is not None else cfg.train.seed


def _prepare_out(path, force: bool) -> Path:
    out = Path(path)
    if out.exists() and not out.is_dir():
        raise CommandError(f"output path {out} exists and is not a directory")
    if out.exists() and any(out.iterdir()):
        if not force:
            raise CommandError(f"output directory {out} is not empty (use --force to overwrite)")
        if out.resolve() in (Path("/"), Path.home().resolve()):
            raise CommandError(f"refusing to clear {out}")
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require(path, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"{what} not found: {p}")
    return p


def _dataset(path):
    return load_dataset(_require(path, "dataset directory"))


def _checkpoint_dir(path) -> Path:
    p = _require(path, "checkpoint")
    return p / "checkpoint" if (p / "checkpoint" / "manifest.json").exists() else p


def _estimator(path) -> MacDiff:
    return MacDiff.load(_checkpoint_dir(path))


def _write_report(out: Path, command: str, fp: str, seed, results: dict, files=(), started: float = 0.0):
    report = {"command": command, "fingerprint": fp, "seed": seed, "results": results,
              "files": sorted(str(f) for f in files), "version": __version__}
    (out / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True, default=_jsonable))
    run = {"timestamp": time.time(), "seconds": time.time() - started if started else None, "argv": sys.argv[1:]}
    (out / "run.json").write_text(json.dumps(run, indent=2, sort_keys=True))
    return report


def _jsonable(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


def _fp(command: str, cfg: RunConfig | None, args, keys) -> str:
    return fingerprint({"command": command, "config": cfg.to_dict() if cfg else None,
                        "args": {k: getattr(args, k) for k in keys}})


def cmd_synth(args):
    out = _prepare_out(args.out, args.force)
    seed = 0 if args.seed is None else args.seed
    X, y = synth_dataset(args.classes, 2 * args.per_class, args.frames, args.joints, seed)
    splits = np.empty(len(y), dtype=object)
    for c in range(args.classes):
        idx = np.flatnonzero(y == c)
        splits[idx[: args.per_class]] = "train"
        splits[idx[args.per_class:]] = "test"
    stats = compute_stats(X[splits == "train"])
    fp = _fp("synth", None, args, ["classes", "per_class", "frames", "joints", "seed"])
    meta = {"classes": list(range(args.classes)), "seed": seed, "fingerprint": fp, "frames": args.frames,
            "joints": args.joints}
    save_dataset(out, list(X), y.tolist(), splits.tolist(), stats, meta)
    counts = {s: int((splits == s).sum()) for s in ("train", "test")}
    log(f"wrote {len(X)} sequences ({counts}) to {out}")
    return out, "synth", fp, seed, {"sequences": counts, "classes": args.classes}, ["manifest.json"]


def cmd_train(args):
    data = _dataset(args.data)
    X, _ = data.subset("train")
    if X.ndim != 4:
        raise CommandError(f"dataset {args.data} has no training split")
    cfg = _run_config(args, {"num_joints": X.shape[2]})
    out = _prepare_out(args.out, args.force)
    stats = data.stats or compute_stats(X)
    every = max(1, args.log_every)

    def progress(step, loss):
        if step % every == 0:
            log(f"step {step} loss {loss:.5f}")

    state = run_training(X, cfg.train, stats, out_dir=out, progress=progress)
    fp = _fp("train", cfg, args, ["data"])
    tail = state.losses[-min(50, len(state.losses)):]
    results = {"steps": state.step, "epochs": state.epoch, "final_loss": state.losses[-1],
               "smoothed_loss": float(np.mean(tail)), "initial_loss": state.losses[0]}
    return out, "train", fp, cfg.train.seed, results, ["checkpoint", "loss.csv"]


def _features(est: MacDiff, X):
    return extract_features(est.model_, X, est.stats_).features


def cmd_probe(args):
    est = _estimator(args.checkpoint)
    data = _dataset(args.data)
    cfg = _run_config(args)
    seed = _seed(args, cfg)
    out = _prepare_out(args.out, args.force)
    (Xtr, ytr), (Xte, yte) = data.subset("train"), data.subset("test")
    Ftr, Fte = _features(est, Xtr), _features(est, Xte)
    clf = LinearProbeClassifier(epochs=cfg.eval.probe_epochs, lr=cfg.eval.probe_lr, random_state=seed)
    clf.fit(Ftr, ytr, eval_set=(Fte, yte))
    acc = float(clf.score(Fte, yte))
    shuffled = np.random.default_rng(seed).permutation(ytr)
    control = LinearProbeClassifier(epochs=cfg.eval.probe_epochs, lr=cfg.eval.probe_lr, random_state=seed)
    control_acc = float(control.fit(Ftr, shuffled).score(Fte, yte))
    with open(out / "probe_epochs.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "test_accuracy"])
        for i, a in enumerate(clf.history_, 1):
            w.writerow([i, repr(float(a))])
    log(f"probe accuracy {acc:.4f} (shuffled-label control {control_acc:.4f})")
    fp = _fp("probe", cfg, args, ["checkpoint", "data"])
    results = {"accuracy": acc, "shuffled_label_accuracy": control_acc, "chance": 1.0 / len(np.unique(ytr))}
    return out, "probe", fp, seed, results, ["probe_epochs.csv"]


def _finetune_kwargs(cfg: RunConfig, args):
    e = cfg.eval
    return dict(epochs=e.finetune_epochs, lr_start=e.finetune_lr_start, lr_end=e.finetune_lr_end,
                batch_size=e.batch_size, freeze_encoder=args.freeze_encoder)


def cmd_finetune(args):
    est = _estimator(args.checkpoint)
    data = _dataset(args.data)
    cfg = _run_config(args)
    seed = _seed(args, cfg)
    out = _prepare_out(args.out, args.force)
    (Xtr, ytr), (Xte, yte) = data.subset("train"), data.subset("test")
    fraction = args.fraction if args.fraction is not None else cfg.eval.fraction
    res = finetune(est.model_, Xtr, ytr, Xte, yte, est.stats_, fraction, seed=seed,
                   train_config=est.train_state_.config, **_finetune_kwargs(cfg, args))
    log(f"fine-tune accuracy {res.accuracy:.4f} on {res.train_size} training samples")
    fp = _fp("finetune", cfg, args, ["checkpoint", "data", "fraction", "freeze_encoder"])
    return out, "finetune", fp, seed, {"accuracy": res.accuracy, "train_size": res.train_size,
                                       "final_loss": res.history[-1] if res.history else None}, []


def cmd_semi(args):
    est = _estimator(args.checkpoint)
    data = _dataset(args.data)
    cfg = _run_config(args)
    seed = _seed(args, cfg)
    out = _prepare_out(args.out, args.force)
    (Xtr, ytr), (Xte, yte) = data.subset("train"), data.subset("test")
    fraction = args.fraction if args.fraction is not None else cfg.eval.fraction
    ratio = args.ratio if args.ratio is not None else cfg.augment.ratio
    t_s = args.t_s if args.t_s is not None else cfg.augment.t_s
    res = semi_supervised_run(est.model_, Xtr, ytr, Xte, yte, est.stats_, est.schedule_, fraction, ratio, t_s,
                              seed=seed, train_config=est.train_state_.config, **_finetune_kwargs(cfg, args))
    log(f"baseline {res.baseline.accuracy:.4f}, augmented {res.augmented.accuracy:.4f}")
    fp = _fp("semi", cfg, args, ["checkpoint", "data", "fraction", "ratio", "t_s", "freeze_encoder"])
    results = {"baseline_accuracy": res.baseline.accuracy, "augmented_accuracy": res.augmented.accuracy,
               "gain": res.gain, "fraction": fraction, "ratio": ratio, "t_s": t_s,
               "labeled": res.baseline.train_size, "augmented_train_size": res.augmented.train_size}
    return out, "semi", fp, seed, results, []


def _save_sequences(out: Path, X, labels, split: str, fp: str, meta: dict, stats):
    meta = dict(meta, fingerprint=fp)
    save_dataset(out, list(X), labels, [split] * len(X), stats, meta)
    return [f"{split}_{i:05d}.skl" for i in range(len(X))] + ["manifest.json"]


def cmd_generate(args):
    est = _estimator(args.checkpoint)
    cfg = _run_config(args)
    seed = _seed(args, cfg)
    out = _prepare_out(args.out, args.force)
    est.sampling_steps = cfg.sampler.num_steps
    est.clip_x0 = cfg.sampler.clip_x0
    condition = None
    if args.condition_data:
        Xc, _ = _dataset(args.condition_data).subset("train")
        if len(Xc) < args.n:
            raise CommandError(f"condition dataset holds {len(Xc)} training sequences, need {args.n}")
        condition = Xc[: args.n]
    log(f"sampling {args.n} sequences with {cfg.sampler.num_steps} DDIM steps")
    X = est.sample(args.n, random_state=seed, condition_from=condition)
    fp = _fp("generate", cfg, args, ["checkpoint", "n", "condition_data"])
    files = _save_sequences(out, X, [None] * len(X), "generated", fp,
                            {"seed": seed, "num_steps": cfg.sampler.num_steps,
                             "conditional": condition is not None}, est.stats_)
    return out, "generate", fp, seed, {"generated": len(X)}, files


def cmd_inpaint(args):
    est = _estimator(args.checkpoint)
    data = _dataset(args.data)
    cfg = _run_config(args)
    seed = _seed(args, cfg)
    out = _prepare_out(args.out, args.force)
    est.sampling_steps = cfg.inpaint.num_steps
    est.clip_x0 = cfg.inpaint.clip_x0
    X, y = data.subset(args.split)
    X = to_model_frames(X[: args.n], est.model_.config.num_frames)
    y = y[: args.n]
    if args.reconstruction_steps:
        Xtr, _ = data.subset("train")
        log(f"fitting reconstruction decoder for {args.reconstruction_steps} steps")
        est.fit_reconstruction(Xtr, max_steps=args.reconstruction_steps)
    frames = X.shape[1]
    if args.occlusion == "frames":
        length = args.length if args.length is not None else frames // 2
        spec = OcclusionSpec("frames", (args.start, length))
    else:
        spec = OcclusionSpec("body_part", part=args.part)
    occluded = np.stack([apply_occlusion(x, spec)[0] for x in X])
    observed = spec.observed_mask(frames, X.shape[2])
    filled = est.inpaint(occluded, observed, random_state=seed, resample_count=cfg.inpaint.resample_count)
    hidden = ~observed
    err = mpjpe(filled, X, hidden)
    zero = mpjpe(occluded, X, hidden)
    log(f"occluded MPJPE {err:.4f} vs zero-fill {zero:.4f}")
    fp = _fp("inpaint", cfg, args, ["checkpoint", "data", "split", "n", "occlusion", "start", "length", "part",
                                    "reconstruction_steps"])
    files = _save_sequences(out, filled, [int(v) for v in y], "inpainted", fp,
                            {"seed": seed, "occlusion": {"kind": spec.kind, "frame_range": list(spec.frame_range),
                                                         "part": spec.part}}, est.stats_)
    np.save(out / "observed_mask.npy", observed)
    results = {"mpjpe": err, "zero_fill_mpjpe": zero, "observed_exact": bool(
        np.array_equal(filled[:, observed], X[:, observed].astype(filled.dtype)))}
    return out, "inpaint", fp, seed, results, files + ["observed_mask.npy"]


def cmd_augment(args):
    est = _estimator(args.checkpoint)
    data = _dataset(args.data)
    cfg = _run_config(args)
    seed = _seed(args, cfg)
    out = _prepare_out(args.out, args.force)
    ratio = args.ratio if args.ratio is not None else cfg.augment.ratio
    t_s = args.t_s if args.t_s is not None else cfg.augment.t_s
    idx = [i for i, s in enumerate(data.splits) if s == args.split]
    if not idx:
        raise CommandError(f"dataset has no {args.split!r} split")
    X = np.stack([data.sequences[i] for i in idx])
    y = np.array([-1 if data.labels[i] is None else data.labels[i] for i in idx])
    rng = np.random.default_rng(seed)
    conditions = precompute_conditions(est.model_, X, est.stats_, est.train_state_.config.mask, rng)
    X_all, y_all, src = build_augmented_set(X, y, ratio, t_s, est.model_, est.schedule_, est.stats_, rng,
                                            conditions)
    synth = src >= 0
    fp = _fp("augment", cfg, args, ["checkpoint", "data", "split", "ratio", "t_s"])
    files = _save_sequences(out, X_all[synth], [int(v) for v in y_all[synth]], "augmented", fp,
                            {"seed": seed, "t_s": t_s, "ratio": ratio}, est.stats_)
    entries = [{"file": f"augmented_{i:05d}.skl", "source_file": data.files[idx[s]], "label": int(y_all[synth][i]),
                "seed": seed, "t_s": t_s} for i, s in enumerate(src[synth])]
    (out / "augment_manifest.json").write_text(json.dumps(
        {"fingerprint": fp, "source_dataset": str(args.data), "samples": entries}, indent=2, sort_keys=True))
    log(f"wrote {int(synth.sum())} augmented sequences for {len(X)} real ones")
    return out, "augment", fp, seed, {"real": len(X), "augmented": int(synth.sum()), "t_s": t_s,
                                      "ratio": ratio}, files + ["augment_manifest.json"]


def _all_sequences(path):
    d = _dataset(path)
    if not d.sequences:
        raise CommandError(f"dataset {path} is empty")
    return np.stack(d.sequences)


def cmd_evalgen(args):
    est = _estimator(args.checkpoint)
    cfg = _run_config(args)
    seed = _seed(args, cfg)
    real, gen = _all_sequences(args.real), _all_sequences(args.gen)
    out = _prepare_out(args.out, args.force)
    Fr, Fg = _features(est, real), _features(est, gen)
    report = generative_report(Fr, Fg, rng=np.random.default_rng(seed))
    fp = _fp("evalgen", cfg, args, ["checkpoint", "real", "gen"])
    log(", ".join(f"{k} {v:.5g}" for k, v in sorted(report.metrics.items())))
    return out, "evalgen", fp, seed, dict(report.metrics, real=len(real), generated=len(gen)), []


def cmd_gradcheck(args):
    out = _prepare_out(args.out, args.force)
    seed = 0 if args.seed is None else args.seed
    config = ModelConfig.tiny() if args.model == "tiny" else None
    report = grad_check(tolerance=args.tolerance, h=args.step, max_coords=args.max_coords, seed=seed, config=config)
    fp = _fp("gradcheck", None, args, ["model", "tolerance", "step", "max_coords", "seed"])
    log(f"{report.fraction_ok:.2%} of {report.checked} coordinates within {args.tolerance:g} "
        f"({report.seconds:.1f}s)")
    results = report.to_dict()
    results.pop("seconds")
    if not report.passed:
        _write_report(out, "gradcheck", fp, seed, results, started=args._started)
        raise CommandError(f"gradient check failed: {report.fraction_ok:.2%} within tolerance")
    return out, "gradcheck", fp, seed, results, []


def cmd_schedule_dump(args):
    out = _prepare_out(args.out, args.force)
    s = build_schedule(args.kind, args.T, args.tau)
    s.to_csv(out / "schedule.csv")
    fp = _fp("schedule-dump", None, args, ["kind", "T", "tau"])
    results = {"kind": s.kind, "T": s.T, "tau": s.tau, "alpha_bar_T": float(s.alpha_bar[-1])}
    return out, "schedule-dump", fp, None, results, ["schedule.csv"]


COMMANDS = {
    "synth": cmd_synth, "train": cmd_train, "probe": cmd_probe, "finetune": cmd_finetune, "semi": cmd_semi,
    "generate": cmd_generate, "inpaint": cmd_inpaint, "augment": cmd_augment, "evalgen": cmd_evalgen,
    "gradcheck": cmd_gradcheck, "schedule-dump": cmd_schedule_dump,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML/JSON run config (sections train, sampler, inpaint, augment, eval)")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--force", action="store_true", help="clear a non-empty output directory")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted config override")
    common.add_argument("--preset", choices=("tiny", "full"), default="tiny")

    parser = argparse.ArgumentParser(prog="macdiff", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common], help="write the synthetic labeled dataset")
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--per-class", type=int, default=64, help="train (and test) sequences per class")
    p.add_argument("--frames", type=int, default=64)
    p.add_argument("--joints", type=int, default=25)

    p = sub.add_parser("train", parents=[common], help="pre-train encoder and decoder")
    p.add_argument("--data", required=True)
    p.add_argument("--log-every", type=int, default=50)

    for name, helptext in (("probe", "linear probe on frozen features"), ("finetune", "fine-tune with a head"),
                           ("semi", "paired fine-tuning with and without diffusion augmentation")):
        p = sub.add_parser(name, parents=[common], help=helptext)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--data", required=True)
        if name != "probe":
            p.add_argument("--fraction", type=float, default=None)
            p.add_argument("--freeze-encoder", action="store_true")
        if name == "semi":
            p.add_argument("--ratio", type=float, default=None)
            p.add_argument("--t-s", dest="t_s", type=int, default=None)

    p = sub.add_parser("generate", parents=[common], help="sample sequences with DDIM")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--condition-data", default=None, help="condition on the first n training sequences here")

    p = sub.add_parser("inpaint", parents=[common], help="fill occluded frames or a body part")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--n", type=int, default=16)
    p.add_argument("--occlusion", choices=("frames", "body_part"), default="frames")
    p.add_argument("--start", type=int, default=0)
    p.add_argument("--length", type=int, default=None)
    p.add_argument("--part", choices=sorted(BODY_PARTS), default="right_arm")
    p.add_argument("--reconstruction-steps", type=int, default=0)

    p = sub.add_parser("augment", parents=[common], help="one-step-denoise augmentation of a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--ratio", type=float, default=None)
    p.add_argument("--t-s", dest="t_s", type=int, default=None)

    p = sub.add_parser("evalgen", parents=[common], help="FID, KID, diversity, precision and recall")
    p.add_argument("--checkpoint", required=True, help="encoder used as the feature extractor")
    p.add_argument("--real", required=True)
    p.add_argument("--gen", required=True)

    p = sub.add_parser("gradcheck", parents=[common], help="autograd against finite differences")
    p.add_argument("--model", choices=("tiny", "micro"), default="tiny")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--step", type=float, default=1e-4)
    p.add_argument("--max-coords", type=int, default=4000)

    p = sub.add_parser("schedule-dump", parents=[common], help="write a noise schedule as CSV")
    p.add_argument("--kind", default="inverse_cosine", choices=("linear", "cosine", "inverse_cosine", "blend"))
    p.add_argument("--T", type=int, default=1000)
    p.add_argument("--tau", type=float, default=None)
    return parser


def _error(kind: str, message: str, code: int) -> int:
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    threads = os.environ.get("MACDIFF_THREADS")
    if threads:
        import torch
        torch.set_num_threads(max(1, int(threads)))
    args = build_parser().parse_args(argv)
    args._started = time.time()
    try:
        out, command, fp, seed, results, files = COMMANDS[args.command](args)
        _write_report(out, command, fp, seed, results, files, args._started)
    except ConfigError as e:
        return _error("ConfigError", str(e), EXIT_USAGE)
    except FileNotFoundError as e:
        return _error("FileNotFoundError", str(e), EXIT_USAGE)
    except (CommandError, ValueError, RuntimeError) as e:
        return _error(type(e).__name__, str(e), EXIT_FAILURE)
    return 0


if __name__ == "__main__":
    sys.exit(main())
