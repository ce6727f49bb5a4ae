"""Command-line experiment driver.

Artifacts land under ``<out>/checkpoints``, ``<out>/curves`` and
``<out>/reports``; every report echoes the fully resolved configuration.
Exit codes: 0 success, 1 usage error, 2 runtime or numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from . import checkpoint as ckpt
from . import distill as T
from . import experiment as X
from . import metrics as E
from . import model as M
from .generator import SELECTIONS

log = logging.getLogger("wdistill")

ABLATION_SETS = ("encoder", "decoder", "embed_enc", "embed_dec", "output", "all")
DEFAULT_LRS = (1e-3, 3e-3, 5e-3, 7e-3, 9e-3)
DEFAULT_WARMUPS = (20, 40, 60, 80, 100)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _floats(s: str) -> list[float]:
    return [float(v) for v in s.split(",") if v]


def _ints(s: str) -> list[int]:
    return [int(v) for v in s.split(",") if v]


def _set_path(d: dict, dotted: str, value) -> None:
    *head, last = dotted.split(".")
    for k in head:
        d = d.setdefault(k, {})
    d[last] = value


def resolve_config(args) -> X.ExperimentConfig:
    raw = yaml.safe_load(Path(args.config).read_text()) if args.config else {}
    raw = raw or {}
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        _set_path(raw, k, yaml.safe_load(v))
    if args.out:
        raw["out"] = args.out
    if args.seed is not None:
        raw["seeds"] = [args.seed]
    try:
        return X.ExperimentConfig.from_dict(raw)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from exc


def _dirs(cfg: X.ExperimentConfig) -> dict[str, Path]:
    out = cfg.out_dir
    dirs = {name: out / name for name in ("checkpoints", "curves", "reports")}
    for d in dirs.values():
        d.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(X.dump_config(cfg))
    return dirs


def _write_curve(path: Path, rows: list[T.CurveRow]) -> None:
    E.write_csv([dict(zip(T.CurveRow.FIELDS, r.as_list())) for r in rows], path, T.CurveRow.FIELDS)


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _emit(obj) -> None:
    print(json.dumps(obj, sort_keys=True))


def _load_teacher(cfg: X.ExperimentConfig, path: str | None = None) -> T.Teacher:
    path = Path(path) if path else cfg.out_dir / "checkpoints" / "teacher.ckpt"
    if not path.exists():
        raise FileNotFoundError(f"teacher checkpoint not found: {path} (run train-teacher first)")
    params, mcfg, _ = ckpt.load_params(path, requires_grad=False)
    return T.Teacher(params, mcfg)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train_teacher(cfg: X.ExperimentConfig, args) -> dict:
    dirs = _dirs(cfg)
    if args.seed is not None:
        cfg = replace(cfg, teacher_train=replace(cfg.teacher_train, seed=args.seed))
    res = X.run_teacher(cfg)
    ckpt.save_params(dirs["checkpoints"] / "teacher.ckpt", res.params, res.cfg, {"echo": res.echo})
    _write_curve(dirs["curves"] / "teacher.csv", res.curves["teacher"])
    report = json.loads(res.report.to_json())
    _write_json(dirs["reports"] / "teacher.json", report)
    return {
        "checkpoint": str(dirs["checkpoints"] / "teacher.ckpt"),
        "digest": ckpt.digest(dirs["checkpoints"] / "teacher.ckpt"),
        "token_accuracy": res.report.token_accuracy,
        "bleu": res.report.bleu,
    }


def _save_student_run(dirs, tag: str, res: X.RunResult) -> dict:
    ck = dirs["checkpoints"] / f"student_{tag}.ckpt"
    ckpt.save_params(ck, res.params, res.cfg, {"echo": res.echo})
    if res.generator is not None:
        ckpt.save_generator(dirs["checkpoints"] / f"generator_{tag}.ckpt", res.generator, {"echo": res.echo})
    for phase, rows in res.curves.items():
        _write_curve(dirs["curves"] / f"{tag}_{phase}.csv", rows)
    report = json.loads(res.report.to_json())
    _write_json(dirs["reports"] / f"{tag}.json", report)
    return report


def cmd_distill(cfg: X.ExperimentConfig, args) -> dict:
    method = args.method
    if method not in X.METHODS:
        raise UsageError(f"unknown method {method!r}; expected one of {X.METHODS}")
    dirs = _dirs(cfg)
    teacher = _load_teacher(cfg) if method != "none" else None
    runner = X.StudentRunner(cfg, teacher, X.make_data(cfg.task))
    accs = {}
    for seed in cfg.seeds:
        res = runner.run(method, seed)
        tag = f"{method}_s{seed}"
        _save_student_run(dirs, tag, res)
        accs[seed] = res.report.token_accuracy
    return {"method": method, "token_accuracy": accs, "median_token_accuracy": X.median(list(accs.values()))}


def cmd_ablate(cfg: X.ExperimentConfig, args) -> dict:
    sets = args.classes.split(",") if args.classes else list(ABLATION_SETS)
    for s in sets:
        if s not in SELECTIONS:
            raise UsageError(f"unknown class set {s!r}; expected one of {SELECTIONS}")
    dirs = _dirs(cfg)
    teacher = _load_teacher(cfg)
    runner = X.StudentRunner(cfg, teacher, X.make_data(cfg.task))
    rows = []
    for s in sets:
        accs, bleus, echo = [], [], None
        for seed in cfg.seeds:
            # "none" is the plain student; every other row is WD without the KD term
            if s == "none":
                res = runner.run("none", seed)
            else:
                res = runner.run("wd", seed, selected_classes=(s,), alpha=1.0)
            accs.append(res.report.token_accuracy)
            bleus.append(res.report.bleu)
            echo = res.echo
        rows.append(
            {
                "selected_classes": s,
                "alpha": echo["alpha"],
                "seeds": " ".join(map(str, cfg.seeds)),
                "token_accuracy_median": X.median(accs),
                "bleu_median": X.median(bleus),
                "token_accuracy_per_seed": " ".join(f"{a:.6f}" for a in accs),
                "config": json.dumps(echo, sort_keys=True),
            }
        )
    path = dirs["reports"] / "ablation.csv"
    E.write_csv(rows, path)
    return {"table": str(path), "rows": [{k: r[k] for k in ("selected_classes", "alpha", "token_accuracy_median")} for r in rows]}


def cmd_sweep(cfg: X.ExperimentConfig, args) -> dict:
    dirs = _dirs(cfg)
    splits = X.make_data(cfg.task)
    teacher = _load_teacher(cfg)
    sample = splits.test.sources[: cfg.bench_size]
    t_speed = E.bench_decode(teacher.params, teacher.cfg, sample, cfg.bench_repeats).sentences_per_second
    rows = [
        {
            "cell": "teacher",
            "seed": "",
            "token_accuracy": E.teacher_forced_accuracy(teacher.params, teacher.cfg, splits.test),
            "bleu": "",
            "sentences_per_second": t_speed,
            "speedup": 1.0,
            "params_count": M.param_count(teacher.cfg),
        }
    ]
    if args.grid == "lr-warmup":
        lrs = _floats(args.lrs) if args.lrs else list(DEFAULT_LRS)
        warmups = _ints(args.warmups) if args.warmups else list(DEFAULT_WARMUPS)
        if not lrs or not warmups:
            raise UsageError("empty sweep grid")
        cells = [({"lr": lr, "warmup": w}, replace(cfg, student_train=replace(cfg.student_train, base_lr=lr, warmup_steps=w))) for lr in lrs for w in warmups]
    elif args.grid == "depth-width":
        depths = _ints(args.depths) if args.depths else [1, 2]
        widths = _ints(args.widths) if args.widths else [16, 32]
        if not depths or not widths:
            raise UsageError("empty sweep grid")
        cells = []
        for dep in depths:
            for wid in widths:
                heads = cfg.student.heads if wid % cfg.student.heads == 0 else 1
                student = replace(cfg.student, dec_depth=dep, width=wid, ffn_hidden=4 * wid, heads=heads)
                cells.append(({"dec_depth": dep, "width": wid}, replace(cfg, student=student)))
    else:
        raise UsageError(f"unknown grid {args.grid!r}")
    for cell, ccfg in cells:
        runner = X.StudentRunner(ccfg, teacher, splits)
        for seed in cfg.seeds:
            res = runner.run(args.method, seed)
            speed = E.bench_decode(res.params, res.cfg, sample, cfg.bench_repeats).sentences_per_second
            rows.append(
                {
                    "cell": json.dumps(cell, sort_keys=True),
                    "seed": seed,
                    "token_accuracy": res.report.token_accuracy,
                    "bleu": res.report.bleu,
                    "sentences_per_second": speed,
                    "speedup": speed / t_speed,
                    "params_count": res.report.params_count,
                }
            )
    for r in rows:
        r["config"] = json.dumps({"grid": args.grid, "method": args.method, "experiment": cfg.to_dict()}, sort_keys=True)
    path = dirs["reports"] / f"sweep_{args.grid}.csv"
    E.write_csv(rows, path)
    return {"table": str(path), "rows": len(rows) - 1}


def cmd_bench(cfg: X.ExperimentConfig, args) -> dict:
    dirs = _dirs(cfg)
    path = Path(args.checkpoint) if args.checkpoint else dirs["checkpoints"] / "teacher.ckpt"
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    params, mcfg, _ = ckpt.load_params(path, requires_grad=False)
    splits = X.make_data(cfg.task)
    sample = splits.test.sources[: cfg.bench_size]
    repeats = args.repeats if args.repeats is not None else cfg.bench_repeats
    res = E.bench_decode(params, mcfg, sample, repeats)
    report = E.EvalReport(
        E.teacher_forced_accuracy(params, mcfg, splits.test),
        E.corpus_bleu(res.outputs, [t[:-1] for t in splits.test.targets[: len(sample)]]),
        res.sentences_per_second,
        M.param_count(mcfg),
        {"checkpoint": str(path), "repeats": repeats, "experiment": cfg.to_dict()},
    )
    out = json.loads(report.to_json())
    out["per_run"] = res.per_run
    if args.reference:
        ref_params, ref_cfg, _ = ckpt.load_params(args.reference, requires_grad=False)
        ref = E.bench_decode(ref_params, ref_cfg, sample, repeats)
        out["reference_sentences_per_second"] = ref.sentences_per_second
        out["speedup"] = res.sentences_per_second / ref.sentences_per_second
    _write_json(dirs["reports"] / f"bench_{path.stem}.json", out)
    return out


def cmd_eval(cfg: X.ExperimentConfig, args) -> dict:
    dirs = _dirs(cfg)
    path = Path(args.checkpoint) if args.checkpoint else dirs["checkpoints"] / "teacher.ckpt"
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    params, mcfg, _ = ckpt.load_params(path, requires_grad=False)
    splits = X.make_data(cfg.task)
    report = E.evaluate(params, mcfg, splits.test, {"checkpoint": str(path), "experiment": cfg.to_dict()}, bench_size=cfg.bench_size)
    out = json.loads(report.to_json())
    _write_json(dirs["reports"] / f"eval_{path.stem}.json", out)
    return out


COMMANDS = {
    "train-teacher": cmd_train_teacher,
    "distill": cmd_distill,
    "ablate": cmd_ablate,
    "sweep": cmd_sweep,
    "bench": cmd_bench,
    "eval": cmd_eval,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="wdistill", description="Weight distillation experiments on toy seq2seq tasks.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("--config", help="YAML experiment config")
        p.add_argument("--seed", type=int, help="run a single seed (overrides the config's seeds)")
        p.add_argument("--out", help="experiment directory")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config value, e.g. student.width=16")
        return p

    common(sub.add_parser("train-teacher", help="train the teacher"))
    p = common(sub.add_parser("distill", help="train students with one method"))
    p.add_argument("--method", default="wd", choices=X.METHODS)
    p = common(sub.add_parser("ablate", help="WD with one weight-class set at a time"))
    p.add_argument("--classes", help=f"comma list from {','.join(SELECTIONS)}")
    p = common(sub.add_parser("sweep", help="grid over lr x warmup or depth x width"))
    p.add_argument("--grid", default="lr-warmup", choices=("lr-warmup", "depth-width"))
    p.add_argument("--method", default="wd", choices=X.METHODS)
    p.add_argument("--lrs")
    p.add_argument("--warmups")
    p.add_argument("--depths")
    p.add_argument("--widths")
    p = common(sub.add_parser("bench", help="decode throughput of a checkpoint"))
    p.add_argument("--checkpoint")
    p.add_argument("--reference", help="checkpoint to compute the speedup against")
    p.add_argument("--repeats", type=int)
    p = common(sub.add_parser("eval", help="evaluate a checkpoint on the test split"))
    p.add_argument("--checkpoint")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.ERROR, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        result = COMMANDS[args.command](cfg, args)
    except UsageError as exc:
        print(f"wdistill: {exc}", file=sys.stderr)
        return 1
    except (T.TrainingDivergedError, FloatingPointError, OSError, ValueError, ckpt.CheckpointError) as exc:
        print(f"wdistill: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    _emit(result)
    return 0


if __name__ == "__main__":
    sys.exit(main())
