"""Command-line entry point: ``mhri <subcommand> ...``.

Exit status is 0 on success, 1 on user error (bad flags, invalid input
files or configs) and 2 on internal error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import traceback
from pathlib import Path

from .errors import MhriError

log = logging.getLogger("mhri")

EXIT_OK, EXIT_USER, EXIT_INTERNAL = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


# ------------------------------------------------------------------ helpers
def _read_flat_config(path) -> dict:
    if path is None:
        return {}
    with open(path, encoding="utf-8") as fh:
        try:
            values = json.load(fh)
        except json.JSONDecodeError as exc:
            raise UsageError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(values, dict) or any(isinstance(v, dict) for v in values.values()):
        raise UsageError(f"{path}: config must be a flat JSON object")
    return values


def _emit_config(name: str, values: dict, out_path=None) -> None:
    """Echo the resolved config and, when given, write it next to the outputs."""
    text = json.dumps(values, indent=2, sort_keys=True)
    print(f"# resolved {name} config\n{text}")
    if out_path is not None:
        Path(out_path).write_text(text + "\n", encoding="utf-8")


def _write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _train_config(args):
    from .train import TrainConfig

    values = _read_flat_config(args.config)
    overrides = {
        "k_folds": args.folds, "seed": args.seed, "epochs": args.epochs, "lr": args.lr,
        "batch_size": args.batch_size, "multitask": args.multitask, "kl_s": args.kl_s, "kl_r": args.kl_r,
    }
    values.update({k: v for k, v in overrides.items() if v is not None})
    return TrainConfig.from_dict(values)


def _load_model(path):
    from .checkpoint import load_checkpoint
    from .model import MHRIModel

    params, config, header = load_checkpoint(path)
    return MHRIModel(config, params), header


# ------------------------------------------------------------- subcommands
def cmd_generate(args) -> int:
    from .data import save_dataset
    from .synth import SynthConfig, generate_dataset

    values = _read_flat_config(args.config)
    if args.seed is not None:
        values["seed"] = args.seed
    if args.n_episodes is not None:
        values["n_episodes"] = args.n_episodes
    config = SynthConfig.from_dict(values)
    out = Path(args.out)
    _emit_config("synth", config.to_dict(), out.with_name(out.name + ".config.json"))
    episodes = generate_dataset(config)
    save_dataset(episodes, out)
    print(f"wrote {len(episodes)} episodes ({sum(len(e) for e in episodes)} utterances) to {out}")
    return EXIT_OK


def cmd_stats(args) -> int:
    from .data import dataset_stats, load_dataset

    _emit_config("stats", {"data": str(args.data)})
    report = dataset_stats(load_dataset(args.data))
    for key, value in report.to_dict().items():
        print(f"{key:28s} {value:.4f}" if isinstance(value, float) else f"{key:28s} {value}")
    if args.report:
        _write_json(args.report, report.to_dict())
    return EXIT_OK


def cmd_train(args) -> int:
    from .data import load_dataset
    from .evaluate import render_results_table
    from .train import cross_validate, train_fold

    config = _train_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _emit_config("train", config.to_dict(), out / "config.json")
    episodes = load_dataset(args.data)
    cv = cross_validate(episodes, config, out_dir=out, workers=args.workers)
    _write_json(out / "report.json", cv.report())
    if args.full:
        train_fold(episodes, config, fold_index=-1, checkpoint_path=out / "model.ckpt")
    print(render_results_table({f"fold {f.fold_index}": f.metrics for f in cv.folds} | {"mean": cv.aggregate}))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .data import load_dataset
    from .evaluate import render_results_table
    from .metrics import evaluate_model

    model, _ = _load_model(args.checkpoint)
    _emit_config("model", model.config.to_dict())
    report = evaluate_model(model, load_dataset(args.data))
    print(render_results_table({"model": report}))
    if args.report:
        _write_json(args.report, report.to_dict())
    return EXIT_OK


def cmd_baseline(args) -> int:
    from .data import load_dataset
    from .evaluate import render_results_table, run_gaze_baseline

    _emit_config("baseline", {"data": str(args.data), "rule": "gaze on robot -> respond to speaker, else none"})
    report = run_gaze_baseline(load_dataset(args.data))
    print(render_results_table({"if-then (gaze)": report}))
    if args.report:
        _write_json(args.report, report.to_dict())
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .data import load_dataset
    from .evaluate import render_ablation_table, run_ablation

    config = _train_config(args)
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _emit_config("train", config.to_dict() | {"ablation_seeds": seeds}, out / "config.json")
    rows = run_ablation(load_dataset(args.data), config, seeds, workers=args.workers)
    table = render_ablation_table(rows)
    (out / "ablation.txt").write_text(table + "\n", encoding="utf-8")
    _write_json(out / "ablation.json", [r.to_dict() for r in rows])
    print(table)
    return EXIT_OK


def cmd_predict(args) -> int:
    from .data import load_dataset
    from .evaluate import measure_latency
    from .metrics import predict_episodes

    model, _ = _load_model(args.checkpoint)
    _emit_config("model", model.config.to_dict())
    episodes = load_dataset(args.data)
    rows = predict_episodes(model, episodes)
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            for ep, preds in zip(episodes, rows):
                fh.write(json.dumps({"episode_id": ep.episode_id, "predictions": preds}) + "\n")
    print(f"predicted {sum(len(r) for r in rows)} utterances in {len(episodes)} episodes")
    if args.measure_latency:
        mean, std = measure_latency(model, episodes, args.repetitions)
        print(f"per-decision latency: {mean:.6f} s (std {std:.6f} s)")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradsuite import run_gradcheck_suite

    _emit_config("gradcheck", {"seed": args.seed})

    def show(r):
        print(f"{'ok  ' if r.passed else 'FAIL'} {r.name:26s} max rel err {r.error:.3e} (tol {r.tolerance:.0e})")

    results = run_gradcheck_suite(args.seed, report=show)
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_OK if not failed else EXIT_USER


def cmd_export(args) -> int:
    from .data import load_dataset
    from .evaluate import export_embeddings

    model, _ = _load_model(args.checkpoint)
    _emit_config("model", model.config.to_dict())
    n = export_embeddings(model, load_dataset(args.data), args.out, which=args.which)
    print(f"wrote {n} rows to {args.out}")
    return EXIT_OK


# ------------------------------------------------------------------ parser
def _add_train_flags(p) -> None:
    p.add_argument("--config", help="flat JSON file with training settings")
    p.add_argument("--seed", type=int, help="base seed (overrides config)")
    p.add_argument("--epochs", type=int, help="epochs per fold (overrides config)")
    p.add_argument("--lr", type=float, help="learning rate (overrides config)")
    p.add_argument("--batch-size", type=int, help="episodes per batch (overrides config)")
    p.add_argument("--folds", type=int, help="number of cross-validation folds")
    p.add_argument("--workers", type=int, default=None, help="train folds in this many processes")
    for flag, dest, text in (("multitask", "multitask", "scene head in the objective"),
                             ("kl-s", "kl_s", "turn-taking KL term"), ("kl-r", "kl_r", "robot-address KL term")):
        p.add_argument(f"--{flag}", dest=dest, action=argparse.BooleanOptionalAction, default=None,
                       help=f"toggle the {text}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mhri", description="Multi-party HRI scene recognition and response decisions.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("generate", help="write a synthetic dataset")
    p.add_argument("--config", help="flat JSON file with generator settings")
    p.add_argument("--out", required=True, help="output JSONL path")
    p.add_argument("--seed", type=int, help="generator seed (overrides config)")
    p.add_argument("--n-episodes", type=int, help="number of episodes (overrides config)")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("stats", help="summarise a dataset")
    p.add_argument("--data", required=True, help="dataset JSONL")
    p.add_argument("--report", help="optional JSON output")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("train", help="k-fold cross-validated training")
    p.add_argument("--data", required=True, help="dataset JSONL")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--full", action="store_true", help="also train model.ckpt on every episode")
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--data", required=True, help="dataset JSONL")
    p.add_argument("--report", help="JSON metrics output")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="six-row ablation over seeds")
    p.add_argument("--data", required=True, help="dataset JSONL")
    p.add_argument("--seeds", default="0,1,2", help="comma-separated seeds")
    p.add_argument("--out", required=True, help="output directory")
    _add_train_flags(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("baseline", help="gaze if-then baseline")
    p.add_argument("--data", required=True, help="dataset JSONL")
    p.add_argument("--report", help="JSON metrics output")
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("predict", help="per-utterance decisions from a checkpoint")
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--data", required=True, help="dataset JSONL")
    p.add_argument("--out", help="JSONL predictions output")
    p.add_argument("--measure-latency", action="store_true", help="report mean per-decision time")
    p.add_argument("--repetitions", type=int, default=5, help="timed passes for latency (>= 3)")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification suite")
    p.add_argument("--seed", type=int, default=0, help="seed for the random instances")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("export-embeddings", help="write per-utterance vectors as CSV")
    p.add_argument("--checkpoint", required=True, help="checkpoint file")
    p.add_argument("--data", required=True, help="dataset JSONL")
    p.add_argument("--out", required=True, help="CSV output path")
    p.add_argument("--which", choices=("hidden", "fused"), default="hidden", help="which representation")
    p.set_defaults(func=cmd_export)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USER
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USER
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, MhriError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER
    except Exception:
        traceback.print_exc()
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
