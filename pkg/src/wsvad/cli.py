"""Command-line surface: synth, train, evaluate, score, gradcheck,
ablate.
"""

from __future__ import annotations

import argparse
import json
import logging
import subprocess
import sys
from pathlib import Path

from . import __version__
from . import losses as ls
from .errors import ContractError, WsvadError
from .evaluation import DEFAULT_KAPPA, evaluate_bags
from .features import (SynthSpec, generate_synth, load_manifest, read_features,
                       split_synth, write_dataset, FRAMES_PER_SNIPPET)
from .metrics import smooth_scores, expand_to_frames
from .model import TOGGLES
from .training import (TrainConfig, load_checkpoint, model_config_for,
                       save_checkpoint, train)

log = logging.getLogger("wsvad")


def build_id() -> str:
    try:
        rev = subprocess.run(["git", "describe", "--always", "--dirty"],
                             capture_output=True, text=True, timeout=5)
        if rev.returncode == 0:
            return f"wsvad-{__version__}+{rev.stdout.strip()}"
    except (OSError, subprocess.TimeoutExpired):
        pass
    return f"wsvad-{__version__}"


def _parse_disabled(raw: str | None) -> tuple[str, ...]:
    if not raw:
        return ()
    toggles = tuple(t.strip() for t in raw.split(",") if t.strip())
    unknown = set(toggles) - set(TOGGLES)
    if unknown:
        raise ContractError(f"unknown toggles {sorted(unknown)}; valid: {', '.join(TOGGLES)}")
    return toggles


# ----------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------

def cmd_synth(args) -> int:
    spec = SynthSpec(n_normal=args.normals, n_abnormal=args.abnormals,
                     t_range=(args.t_min, args.t_max), anomaly_span_fraction=args.span,
                     mean_shift=args.mean_shift, magnitude_gain=args.gain,
                     crops=args.crops, seed=args.seed)
    bags, oracle = generate_synth(spec)
    split_synth(bags, args.test_normals, args.test_abnormals)
    manifest = write_dataset(bags, oracle, args.out)
    n_test = args.test_normals + args.test_abnormals
    print(f"wrote {len(bags)} videos ({len(bags) - n_test} train, {n_test} test) "
          f"-> {manifest}")
    return 0


def cmd_train(args) -> int:
    bags = load_manifest(args.manifest)
    train_bags = [b for b in bags if b.split == "train"]
    disabled = _parse_disabled(args.disable)
    model_cfg = model_config_for(train_bags, d_model=args.d_model, heads=args.heads,
                                 radius=args.radius, disabled=disabled,
                                 clf_kernel=args.clf_kernel, dropout=args.dropout)
    train_cfg = TrainConfig(lr_rgb=args.lr_rgb, lr_flow=args.lr_flow,
                            lr_audio=args.lr_audio, lr_uniform=args.lr,
                            batch_videos=args.batch, epochs=args.epochs,
                            seed=args.seed)
    weights = ls.LossWeights(lam_kd=args.lam_kd, lam_mc=args.lam_mc,
                             lam_dm=args.lam_dm, lam_kl=args.lam_kl)
    teacher = None
    if args.teacher:
        teacher, _ = load_checkpoint(args.teacher)

    has_test = any(b.split == "test" for b in bags)

    def epoch_hook(epoch, model):
        if not has_test or not args.eval_each_epoch:
            return {}
        report, _ = evaluate_bags(model, bags, kappa=args.kappa)
        return {"auc": report.auc, "ap": report.ap}

    result = train(bags, model_cfg, train_cfg, weights, teacher=teacher,
                   epoch_hook=epoch_hook)
    for rec in result.history:
        parts = " ".join(f"{k}={rec[k]:.5f}" for k in ("total", "mil", "dm", "mc", "kl")
                         if k in rec)
        extra = f" auc={rec['auc']:.4f} ap={rec['ap']:.4f}" if "auc" in rec else ""
        print(f"epoch {rec['epoch']:>3}: {parts}{extra}")
    save_checkpoint(args.out, result.model,
                    extra={"history": result.history, "train": result.config["train"],
                           "weights": {k: v for k, v in result.config["weights"].items()}})
    print(f"checkpoint -> {args.out}")
    return 0


def cmd_evaluate(args) -> int:
    from .reporting import write_report
    model, meta = load_checkpoint(args.ckpt)
    bags = load_manifest(args.manifest)
    report, series = evaluate_bags(model, bags, kappa=args.kappa,
                                   use_ss=not args.no_ss)
    test = [b for b in bags if b.split == "test"]
    out = write_report(report, series, test, args.report, build_id=build_id(),
                       config_echo={"model": meta.get("model", {}),
                                    "checkpoint": str(args.ckpt)},
                       figures=not args.no_figures)
    print(f"auc={report.auc:.4f} anomaly_auc={report.anomaly_auc:.4f} "
          f"ap={report.ap:.4f} far={report.far:.4f}")
    print(f"report -> {out}")
    return 0


def cmd_score(args) -> int:
    from .evaluation import score_video
    from .features import VideoBag
    model, _ = load_checkpoint(args.ckpt)
    sequences = {}
    for pair in args.features:
        if "=" not in pair:
            raise ContractError(f"--features expects modality=path, got {pair!r}")
        modality, path = pair.split("=", 1)
        sequences[modality] = read_features(path, modality)
    t = next(iter(sequences.values())).snippets
    bag = VideoBag(video_id="<cli>", label=0, split="test", snippets=t,
                   frame_count=args.frames, sequences=sequences)
    snippet = score_video(model, bag)
    kappa = args.kappa if not args.no_ss else 1
    frames = expand_to_frames(smooth_scores(snippet, kappa),
                              args.frames or t * FRAMES_PER_SNIPPET)
    sink = open(args.out, "w") if args.out else sys.stdout
    try:
        sink.write("frame,score\n")
        for i, v in enumerate(frames):
            sink.write(f"{i},{v:.6f}\n")
    finally:
        if args.out:
            sink.close()
            print(f"scores -> {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    from .suite import run_suite
    results = run_suite(seeds=args.seeds, base_seed=args.seed)
    failed = 0
    for r in results:
        print(r.line())
        failed += 0 if r.passed else 1
    print(f"{len(results) - failed}/{len(results)} checks passed "
          f"(max rel err {max(r.max_rel_err for r in results):.3e})")
    return 0 if failed == 0 else 1


def cmd_ablate(args) -> int:
    from .reporting import ablation_markdown, render_ablation_chart
    grid = _parse_disabled(args.grid) or ("tca", "topk", "mhsa", "dmu", "mc", "ss")
    if args.manifest:
        bags = load_manifest(args.manifest)
    else:
        spec = SynthSpec(n_normal=args.normals, n_abnormal=args.abnormals,
                         mean_shift=args.mean_shift, magnitude_gain=args.gain,
                         seed=args.seed)
        bags, _ = generate_synth(spec)
        split_synth(bags, max(1, args.normals // 5), max(1, args.abnormals // 5))

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = []
    configs = [("full", ())] + [(f"-{t}", (t,)) for t in grid]
    for name, disabled in configs:
        use_ss = "ss" not in disabled
        model_disabled = tuple(t for t in disabled if t != "ss")
        model_cfg = model_config_for([b for b in bags if b.split == "train"],
                                     disabled=model_disabled)
        train_cfg = TrainConfig(lr_uniform=args.lr, epochs=args.epochs, seed=args.seed)
        result = train(bags, model_cfg, train_cfg)
        report, _ = evaluate_bags(result.model, bags, use_ss=use_ss)
        rows.append({"config": name, "auc": report.auc,
                     "anomaly_auc": report.anomaly_auc, "ap": report.ap,
                     "far": report.far})
        print(f"{name:<8} auc={report.auc:.4f} ap={report.ap:.4f}")

    table = ablation_markdown(rows)
    (out_dir / "ablation.md").write_text(table, encoding="utf-8")
    render_ablation_chart(rows, out_dir / "ablation.png")
    with open(out_dir / "ablation.json", "w", encoding="utf-8") as fh:
        json.dump({"build_id": build_id(), "rows": rows}, fh, indent=2)
    print(f"ablation table -> {out_dir / 'ablation.md'}")
    return 0


# ----------------------------------------------------------------------
# parser
# ----------------------------------------------------------------------

def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="wsvad",
                                     description="weakly supervised video anomaly "
                                                 "scoring on precomputed features")
    parser.add_argument("--version", action="version", version=f"wsvad {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset with oracle scores")
    p.add_argument("--out", required=True)
    p.add_argument("--normals", type=int, default=50)
    p.add_argument("--abnormals", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mean-shift", type=float, default=4.0, dest="mean_shift")
    p.add_argument("--gain", type=float, default=1.5)
    p.add_argument("--span", type=float, default=0.5)
    p.add_argument("--t-min", type=int, default=8, dest="t_min")
    p.add_argument("--t-max", type=int, default=24, dest="t_max")
    p.add_argument("--crops", type=int, default=1, choices=(1, 5))
    p.add_argument("--test-normals", type=int, default=10, dest="test_normals")
    p.add_argument("--test-abnormals", type=int, default=10, dest="test_abnormals")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a detector on a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--disable", default="", help="comma-separated ablation toggles")
    p.add_argument("--teacher", default=None, help="frozen checkpoint for distillation")
    p.add_argument("--lr-rgb", type=float, default=1e-6, dest="lr_rgb")
    p.add_argument("--lr-flow", type=float, default=3e-5, dest="lr_flow")
    p.add_argument("--lr-audio", type=float, default=3e-5, dest="lr_audio")
    p.add_argument("--lr", type=float, default=None, help="uniform rate overriding all groups")
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--batch", type=int, default=32)
    p.add_argument("--d-model", type=int, default=128, dest="d_model")
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--radius", type=int, default=8)
    p.add_argument("--clf-kernel", type=int, default=2, dest="clf_kernel")
    p.add_argument("--dropout", type=float, default=0.1)
    p.add_argument("--lam-kd", type=float, default=None, dest="lam_kd")
    p.add_argument("--lam-mc", type=float, default=1.0, dest="lam_mc")
    p.add_argument("--lam-dm", type=float, default=1.0, dest="lam_dm")
    p.add_argument("--lam-kl", type=float, default=1e-3, dest="lam_kl")
    p.add_argument("--kappa", type=int, default=DEFAULT_KAPPA)
    p.add_argument("--no-eval-each-epoch", action="store_false", dest="eval_each_epoch")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="evaluate a checkpoint on a manifest test split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--kappa", type=int, default=DEFAULT_KAPPA)
    p.add_argument("--no-ss", action="store_true", dest="no_ss")
    p.add_argument("--report", required=True)
    p.add_argument("--no-figures", action="store_true", dest="no_figures")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("score", help="emit per-frame scores for one video's features")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--features", nargs="+", required=True,
                   help="modality=path pairs, e.g. rgb_i3d=a.wsvf clip=b.wsvf")
    p.add_argument("--out", default=None, help="CSV path (default stdout)")
    p.add_argument("--kappa", type=int, default=DEFAULT_KAPPA)
    p.add_argument("--no-ss", action="store_true", dest="no_ss")
    p.add_argument("--frames", type=int, default=None)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("gradcheck", help="finite-difference check of every block")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", type=int, default=5)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train/evaluate the toggle grid, emit a table")
    p.add_argument("--grid", default="", help="comma-separated toggles (default: "
                                              "tca,topk,mhsa,dmu,mc,ss)")
    p.add_argument("--out", required=True)
    p.add_argument("--manifest", default=None, help="dataset (default: synthetic)")
    p.add_argument("--normals", type=int, default=50)
    p.add_argument("--abnormals", type=int, default=50)
    p.add_argument("--mean-shift", type=float, default=4.0, dest="mean_shift")
    p.add_argument("--gain", type=float, default=1.5)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--epochs", type=int, default=30)
    p.add_argument("--lr", type=float, default=1e-3)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    logging.getLogger("matplotlib").setLevel(logging.WARNING)
    args = make_parser().parse_args(argv)
    try:
        return args.func(args)
    except WsvadError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
