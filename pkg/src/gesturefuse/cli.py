"""Command-line pipeline: synth -> preprocess -> train -> eval -> explain/ablate.

One binary with subcommands. Options resolve as flags > --config JSON file >
defaults; every artifact echoes the options that produced it. Progress is
emitted as line-oriented JSON events on stdout for machine parsing.

Exit codes: 0 success, 1 runtime error, 2 usage error. MF_THREADS caps
fold-level parallelism.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from gesturefuse import __version__
from gesturefuse.datamodel import label_map, load_session
from gesturefuse.interpret import (
    DEFAULT_ABLATION_SUBSETS,
    ablate,
    attention_heatmap,
    llr_contributions,
)
from gesturefuse.model import (
    ATTENTION,
    LLR,
    FusionModel,
    ModelConfig,
    load_checkpoint,
    save_checkpoint,
)
from gesturefuse.sync import preprocess_session
from gesturefuse.synth import SynthConfig, write_dataset
from gesturefuse.training import (
    EvalReport,
    FoldResult,
    TrainConfig,
    evaluate,
    make_splits,
    partition_fold,
    run_cross_validation,
    train_fold,
)
from gesturefuse.verification import GradCheckConfig, full_model_gradcheck
from gesturefuse.windowing import (
    WindowingConfig,
    filter_training_windows,
    load_windows,
    save_windows,
    segment,
)


def _emit(obj: dict) -> None:
    print(json.dumps(obj), flush=True)


def _echo_config(args: argparse.Namespace, skip=("func", "config")) -> dict:
    return {
        k: (str(v) if isinstance(v, Path) else v)
        for k, v in sorted(vars(args).items())
        if k not in skip and not k.startswith("_")
    }


def _write_json(path: Path, obj: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")


# -- subcommands ----------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = SynthConfig(
        num_participants=args.participants,
        sessions_per_participant=args.sessions,
        repetitions_per_class=args.reps,
        noise_sigma=args.noise,
        seed=args.seed,
    )
    t0 = time.time()
    paths = write_dataset(cfg, args.out)
    _write_json(Path(args.out) / "synth_config.json", _echo_config(args))
    _emit({"event": "synth_done", "sessions": len(paths), "seconds": round(time.time() - t0, 2)})
    return 0


def _discover_sessions(root: Path) -> list[Path]:
    return sorted(p.parent for p in root.rglob("annotations.json"))


def cmd_preprocess(args) -> int:
    root = Path(args.in_dir)
    session_dirs = _discover_sessions(root)
    if not session_dirs:
        raise FileNotFoundError(f"no session directories under {root}")
    wcfg = WindowingConfig(
        window_seconds=args.window,
        step_seconds=args.step,
        vote_threshold=args.vote_threshold,
    )
    all_windows = []
    for d in session_dirs:
        session = load_session(d)
        processed, clap_spans = preprocess_session(
            session,
            sync=not args.no_sync,
            clap_k=args.clap_k,
            clap_min_separation=args.clap_min_sep,
        )
        windows = segment(processed, wcfg)
        kept = filter_training_windows(windows, clap_spans, wcfg.window_seconds)
        all_windows.extend(kept)
        _emit(
            {
                "event": "session_preprocessed",
                "session": f"{session.participant_id}/{session.session_id}",
                "windows": len(windows),
                "kept": len(kept),
            }
        )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_windows(all_windows, out / "windows.bin", config_echo=_echo_config(args))
    _emit({"event": "preprocess_done", "windows": len(all_windows)})
    return 0


def _load_filtered_windows(args):
    windows = load_windows(args.windows)
    excluded = set(filter(None, (args.exclude_sessions or "").split(",")))
    if excluded:
        windows = [w for w in windows if w.session_id not in excluded]
    if not windows:
        raise ValueError("no windows left after exclusions")
    return windows


def _model_config(args) -> ModelConfig:
    return ModelConfig(
        feature_dim=args.feature_dim,
        fusion_kind=args.fusion,
        n_classes=20,
    )


def _train_config(args, seed=None) -> TrainConfig:
    return TrainConfig(
        lr=args.lr,
        max_epochs=args.epochs,
        batch_size=args.batch_size,
        patience=args.patience,
        seed=args.seed if seed is None else seed,
    )


def cmd_train(args) -> int:
    windows = _load_filtered_windows(args)
    split = make_splits(windows, args.split)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    fold_ids = range(len(split.folds)) if args.fold is None else [args.fold]
    summary = {"folds": [], "split": args.split, "config": _echo_config(args)}
    for k in fold_ids:
        fold = split.folds[k]
        train_w, val_w, _ = partition_fold(windows, fold, args.split)
        fold_seed = args.seed * 1000 + k
        tc = _train_config(args, seed=fold_seed)
        resume_state = None
        model = None
        if args.resume:
            model, state = load_checkpoint(args.resume)
            if state.get("fold_index") != k or state.get("split") != args.split:
                raise ValueError("checkpoint does not belong to this fold/split")
            resume_state = state
            rs = resume_state.get("best_snapshot")
            if rs is not None:
                resume_state["best_snapshot"] = rs

        def log(entry, k=k):
            _emit({"event": "epoch", "fold": k, **entry})

        t0 = time.time()
        model, history = train_fold(
            train_w, val_w, _model_config(args), tc,
            log=log, resume_state=resume_state, model=model,
        )
        rng_after = np.random.default_rng(tc.seed + 1)
        # replay shuffles so a fresh resume continues the same stream
        for _ in history:
            rng_after.permutation(len(train_w))
        best = max((h["val_f1"] for h in history), default=0.0)
        trainer_state = {
            "fold_index": k,
            "split": args.split,
            "test_unit": fold.test_unit,
            "val_unit": fold.val_unit,
            "epoch": len(history),
            "best_f1": best,
            "bad_epochs": _bad_epochs(history, best),
            "rng_state": rng_after.bit_generator.state,
            "history": history,
            "stopped": len(history) >= tc.max_epochs or _bad_epochs(history, best) > tc.patience,
            "seed": tc.seed,
        }
        ckpt = out / f"fold_{k:02d}.ckpt"
        save_checkpoint(
            model,
            ckpt,
            trainer_state=trainer_state,
            extra_tensors={f"best/{n}": v for n, v in model.store.snapshot().items()},
        )
        _emit(
            {
                "event": "fold_done",
                "fold": k,
                "test_unit": fold.test_unit,
                "epochs": len(history),
                "best_val_f1": best,
                "seconds": round(time.time() - t0, 1),
                "checkpoint": str(ckpt),
            }
        )
        summary["folds"].append(
            {"fold": k, "checkpoint": str(ckpt), "epochs": len(history), "best_val_f1": best}
        )
    _write_json(out / "train_summary.json", summary)
    return 0


def _bad_epochs(history, best) -> int:
    count = 0
    for h in reversed(history):
        if h["val_f1"] >= best:
            break
        count += 1
    return count


def cmd_eval(args) -> int:
    from gesturefuse.plots import save_confusion_matrix

    windows = _load_filtered_windows(args)
    split = make_splits(windows, args.split)
    ckpt_dir = Path(args.checkpoints)
    results = []
    total_confusion = None
    for k, fold in enumerate(split.folds):
        ckpt = ckpt_dir / f"fold_{k:02d}.ckpt"
        if not ckpt.exists():
            raise FileNotFoundError(f"missing checkpoint {ckpt}")
        model, state = load_checkpoint(ckpt)
        if state.get("test_unit") not in (None, fold.test_unit):
            raise ValueError(
                f"{ckpt}: trained for test unit {state.get('test_unit')}, "
                f"expected {fold.test_unit}"
            )
        _, _, test_w = partition_fold(windows, fold, args.split)
        prec, rec, f1, mat = evaluate(model, test_w)
        results.append(
            FoldResult(
                fold_index=k, test_unit=fold.test_unit, precision=prec,
                recall=rec, macro_f1=f1, confusion=mat, n_test=len(test_w),
            )
        )
        total_confusion = mat if total_confusion is None else total_confusion + mat
        _emit({"event": "fold_evaluated", "fold": k, "macro_f1": f1})
    report = EvalReport(split_kind=args.split, folds=results)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    payload = report.to_dict()
    payload["config"] = _echo_config(args)
    _write_json(out / "report.json", payload)
    (out / "report.txt").write_text(report.to_table() + "\n", encoding="utf-8")
    names = [n for _, n in label_map()][:20]
    save_confusion_matrix(total_confusion, names, out / "confusion.svg")
    _emit(
        {
            "event": "eval_done",
            "split": args.split,
            "macro_f1_mean": payload["macro_f1"]["mean"],
            "macro_f1_std": payload["macro_f1"]["std"],
            "report": str(out / "report.json"),
        }
    )
    return 0


def cmd_explain(args) -> int:
    from gesturefuse.plots import save_attention_heatmap, save_llr_contribution_bars

    model, _ = load_checkpoint(args.checkpoint)
    windows = load_windows(args.windows)
    if not 0 <= args.window < len(windows):
        raise IndexError(f"window id {args.window} outside 0..{len(windows) - 1}")
    output = model.infer(windows[args.window])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    if model.config.fusion_kind == LLR:
        report = llr_contributions(output, window_id=args.window)
        payload = report.to_dict()
        figure = (
            save_llr_contribution_bars(report, out / f"llr_window{args.window}.svg")
            if args.format == "svg"
            else None
        )
    else:
        report = attention_heatmap(output, window_id=args.window)
        payload = report.to_dict()
        figure = (
            save_attention_heatmap(report, out / f"attention_window{args.window}.svg")
            if args.format == "svg"
            else None
        )
    payload["config"] = _echo_config(args)
    path = out / f"explain_window{args.window}.json"
    _write_json(path, payload)
    _emit(
        {
            "event": "explain_done",
            "window": args.window,
            "predicted": payload["predicted_name"],
            "json": str(path),
            "figure": str(figure) if figure else None,
        }
    )
    return 0


def cmd_ablate(args) -> int:
    from gesturefuse.plots import save_ablation_chart

    windows = _load_filtered_windows(args)
    subsets = (
        list(DEFAULT_ABLATION_SUBSETS)
        if args.subsets == "default"
        else [s for s in args.subsets.split(",") if s]
    )
    rows = ablate(
        subsets, windows, args.split, _model_config(args), _train_config(args),
        log=_emit,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(
        out / "ablation.json",
        {"split": args.split, "rows": [r.to_dict() for r in rows], "config": _echo_config(args)},
    )
    with open(out / "ablation.csv", "w", encoding="utf-8") as fh:
        fh.write("subset,mean_f1,std_f1," + ",".join(
            f"fold{i}" for i in range(len(rows[0].fold_f1))
        ) + "\n")
        for r in rows:
            fh.write(
                f"{r.subset},{r.mean_f1:.6f},{r.std_f1:.6f},"
                + ",".join(f"{v:.6f}" for v in r.fold_f1) + "\n"
            )
    save_ablation_chart(rows, out / "ablation.svg")
    _emit({"event": "ablate_done", "rows": len(rows), "out": str(out)})
    return 0


def cmd_gradcheck(args) -> int:
    cfg = GradCheckConfig(
        seed=args.seed,
        feature_dim=args.feature_dim,
        batch=args.batch,
        window_seconds=args.window_seconds,
        fusion_kind=args.fusion,
        h=args.h,
        coords_per_tensor=args.coords,
    )
    t0 = time.time()
    result = full_model_gradcheck(cfg)
    result["seconds"] = round(time.time() - t0, 1)
    _emit({"event": "gradcheck", **result})
    return 0 if result["passed"] else 1


# -- parser ---------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gesturefuse",
        description="Multimodal wearable-sensor gesture recognition pipeline",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--participants", type=int, default=6)
    p.add_argument("--sessions", type=int, default=5)
    p.add_argument("--reps", type=int, default=4, help="repetitions per class per session")
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="sync, resample, standardize, window, label")
    p.add_argument("--in", dest="in_dir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--clap-k", type=float, default=4.0)
    p.add_argument("--clap-min-sep", type=float, default=0.3)
    p.add_argument("--no-sync", action="store_true", help="skip alignment for pre-aligned data")
    p.add_argument("--window", type=float, default=3.0)
    p.add_argument("--step", type=float, default=1.0)
    p.add_argument("--vote-threshold", type=float, default=0.75)
    p.set_defaults(func=cmd_preprocess)

    def add_train_flags(p, with_fold=True):
        p.add_argument("--windows", required=True, help="windows.bin from preprocess")
        p.add_argument("--split", choices=["loso", "lopo"], default="loso")
        p.add_argument("--fusion", choices=[LLR, ATTENTION], default=LLR)
        p.add_argument("--feature-dim", type=int, default=64)
        p.add_argument("--lr", type=float, default=1e-4)
        p.add_argument("--batch-size", type=int, default=32)
        p.add_argument("--epochs", type=int, default=150)
        p.add_argument("--patience", type=int, default=20)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--exclude-sessions", default="", help="comma-separated session ids")

    p = sub.add_parser("train", help="train cross-validation folds")
    add_train_flags(p)
    p.add_argument("--fold", type=int, default=None, help="train a single fold")
    p.add_argument("--resume", default=None, help="resume from a fold checkpoint")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate fold checkpoints")
    p.add_argument("--windows", required=True)
    p.add_argument("--checkpoints", required=True, help="directory with fold_XX.ckpt")
    p.add_argument("--split", choices=["loso", "lopo"], default="loso")
    p.add_argument("--exclude-sessions", default="")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("explain", help="per-window fusion interpretability export")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--windows", required=True)
    p.add_argument("--window", type=int, required=True, help="window id from the index")
    p.add_argument("--format", choices=["json", "svg"], default="svg")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("ablate", help="sensor-subset comparison harness")
    add_train_flags(p)
    p.add_argument("--subsets", default="default", help='"default" or comma list like "CAP+ACC,ACC"')
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model")
    p.add_argument("--seed", type=int, default=1)
    p.add_argument("--fusion", choices=[LLR, ATTENTION], default=LLR)
    p.add_argument("--feature-dim", type=int, default=16)
    p.add_argument("--batch", type=int, default=4)
    p.add_argument("--window-seconds", type=float, default=0.5)
    p.add_argument("--coords", type=int, default=12, help="sampled coordinates per tensor")
    p.add_argument("--h", type=float, default=1e-6)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    if argv is None:
        argv = sys.argv[1:]
    # --config JSON supplies defaults; explicit flags win
    if "--config" in argv:
        i = argv.index("--config")
        cfg_path = argv[i + 1]
        argv = argv[:i] + argv[i + 2 :]
        with open(cfg_path, "r", encoding="utf-8") as fh:
            parser.set_defaults(**json.load(fh))
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001 - single CLI error boundary
        print(json.dumps({"event": "error", "error": f"{type(exc).__name__}: {exc}"}),
              file=sys.stderr, flush=True)
        return 1


if __name__ == "__main__":
    sys.exit(main())
