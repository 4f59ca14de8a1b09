"""Command-line interface.

Subcommands:

* ``gen``          draw one synthetic dataset and write it as CSV
* ``episodes``     split a dataset into a masked context/query episode
* ``pretrain``     train a fresh model on streamed synthetic datasets
* ``predict``      score a test CSV against a labeled context CSV
* ``impute``       fill the missing cells of a CSV
* ``synth``        sample new rows conditioned on a dataset
* ``oracle``       exact conditional-reconstruction round-trips
* ``eval``         run the method suite over a directory of datasets
* ``robustness``   evaluate under shuffled-copy or outlier perturbations
* ``scaling-fit``  fit a power-plus-floor curve to (size, metric) points
* ``finetune``     adapt a checkpoint to one dataset

``--config FILE`` reads ``key=value`` lines and treats them as defaults for
the subcommand's flags; flags given on the command line win.  The ``LDM_SEED``
environment variable overrides the default seed of every command (an explicit
``--seed`` still wins).  Report-style commands write PNG figures next to
their delimited outputs.  With a fixed seed, rerunning any command rewrites
byte-identical files.
"""
from __future__ import annotations

import argparse
import csv
import os
import sys
from pathlib import Path

import numpy as np

from . import plots
from .episodes import MaskSchedule, build_episode
from .exact import (conditionals_from_joint, joint_from_conditionals,
                    random_joint, single_mask_gap, total_variation)
from .harness import (FinetuneConfig, evaluate_suite, evaluate_table,
                      finetune, perturb_outliers, perturb_uninformative,
                      scaling_fit)
from .inference import (ensemble_predict, generate, impute, predict,
                        predict_retrieval)
from .model import Model, ModelConfig, TrainConfig, pretrain
from .scm import ForgeConfig, ForgeError, TaskSpec, sample_dataset
from .tabular import CATEGORICAL, TARGET_COLUMN, load_csv, save_csv

SEED_ENV = "LDM_SEED"


# ---------------------------------------------------------------------------
# shared plumbing


def resolve_seed(value: int | None, fallback: int = 0) -> int:
    """Explicit flag wins, then the LDM_SEED environment variable, then 0."""
    if value is not None:
        return value
    env = os.environ.get(SEED_ENV)
    if env is None:
        return fallback
    try:
        return int(env)
    except ValueError:
        raise SystemExit(f"{SEED_ENV} must be an integer, got {env!r}") from None


def config_tokens(path) -> list[str]:
    """Turn key=value lines into CLI tokens (key true/false toggles a flag)."""
    tokens: list[str] = []
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as exc:
        raise SystemExit(f"cannot read config {path}: {exc}") from None
    for ln, raw in enumerate(lines, 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise SystemExit(f"{path}:{ln}: expected key=value, got {line!r}")
        key, val = (part.strip() for part in line.split("=", 1))
        flag = "--" + key.replace("_", "-")
        if val.lower() == "true":
            tokens.append(flag)
        elif val.lower() == "false":
            continue
        else:
            tokens.extend([flag, val])
    return tokens


def splice_config(argv: list[str]) -> list[str]:
    """Expand ``--config FILE`` into its tokens, placed right after the
    subcommand so explicit flags override the file."""
    rest: list[str] = []
    extra: list[str] = []
    i = 0
    while i < len(argv):
        a = argv[i]
        if a == "--config":
            if i + 1 >= len(argv):
                raise SystemExit("--config needs a file path")
            extra.extend(config_tokens(argv[i + 1]))
            i += 2
        elif a.startswith("--config="):
            extra.extend(config_tokens(a.split("=", 1)[1]))
            i += 1
        else:
            rest.append(a)
            i += 1
    if not extra:
        return rest
    if not rest:
        raise SystemExit("--config requires a subcommand")
    return [rest[0]] + extra + rest[1:]


def _int_pair(text: str) -> tuple[int, int]:
    parts = text.split(",")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected LO,HI, got {text!r}")
    return int(parts[0]), int(parts[1])


def _float_pair(text: str) -> tuple[float, float]:
    parts = text.split(",")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected LO,HI, got {text!r}")
    return float(parts[0]), float(parts[1])


def _float_list(text: str) -> list[float]:
    return [float(p) for p in text.split(",") if p.strip()]


def _int_list(text: str) -> list[int]:
    return [int(p) for p in text.split(",") if p.strip()]


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return str(v)


def write_rows(path, header: list[str], rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def _sibling(path, suffix: str) -> Path:
    p = Path(path)
    return p.parent / (p.stem + suffix)


def _load_table(path, need_target: bool = False):
    try:
        table = load_csv(path)
    except OSError as exc:
        raise SystemExit(f"cannot read {path}: {exc}") from None
    if need_target and table.target is None:
        raise SystemExit(f"{path} needs a {TARGET_COLUMN} column")
    return table


def _load_model(path) -> Model:
    try:
        return Model.load(path)
    except OSError as exc:
        raise SystemExit(f"cannot read checkpoint {path}: {exc}") from None


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(args) -> int:
    rng = np.random.default_rng(resolve_seed(args.seed))
    cfg = ForgeConfig(rows=args.rows, feature_range=args.features)
    task = None
    if args.task != "auto":
        task = TaskSpec(args.task, args.classes if args.task == "cls" else None)
    table, meta = sample_dataset(cfg, rng, task=task)
    save_csv(table, args.out)
    kind = meta["task"]
    extra = f" with {meta['classes']} classes" if kind == "cls" else ""
    print(f"wrote {args.out}: {table.m} rows, {meta['features']} features, "
          f"{kind} target{extra}")
    return 0


def cmd_episodes(args) -> int:
    table = _load_table(args.input, need_target=True)
    rng = np.random.default_rng(resolve_seed(args.seed))
    schedule = MaskSchedule(ratio_range=args.mask_ratio)
    episode = build_episode(table, args.ctx_fraction, schedule, rng)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_csv(episode.context, out / "context.csv")
    save_csv(episode.query, out / "query.csv")
    write_rows(out / "mask.csv", [c.name for c in episode.query.columns],
               episode.mask.astype(int))
    view = episode.view()
    print(f"wrote {out}: context {episode.context.m} rows, query "
          f"{episode.query.m} rows, mask density {view.density:.3f}")
    return 0


def cmd_pretrain(args) -> int:
    seed = resolve_seed(args.seed)
    mcfg = ModelConfig(width=args.width, blocks=args.blocks, heads=args.heads,
                       feature_passes=args.feature_passes,
                       value_bins=args.value_bins,
                       max_columns=args.max_columns,
                       max_classes=args.max_classes,
                       precision=args.precision, seed=seed)
    model = Model.fresh(mcfg)
    forge = ForgeConfig(rows=args.rows, feature_range=args.features)
    data_rng = np.random.default_rng([seed, 1])

    def stream():
        while True:
            try:
                table, _ = sample_dataset(forge, data_rng)
            except ForgeError:
                continue
            yield table

    tcfg = TrainConfig(steps=args.steps, lr=args.lr, warmup=args.warmup,
                       lr_decay=args.lr_decay,
                       episodes_per_step=args.episodes_per_step,
                       seed=seed, log_every=args.log_every)
    schedule = None
    if args.target_focus > 0:
        schedule = MaskSchedule(target_focus_prob=args.target_focus)
    history = pretrain(model, tcfg, stream(), schedule=schedule)
    model.save(args.out)
    write_rows(_sibling(args.out, "_history.csv"), ["step", "loss", "cells"],
               [[h["step"], h["loss"], h["cells"]] for h in history])
    plots.loss_curve(history, _sibling(args.out, "_loss.png"))
    tail = [h["loss"] for h in history[-50:] if np.isfinite(h["loss"])]
    print(f"wrote {args.out} after {args.steps} steps; "
          f"mean loss over last 50: {np.mean(tail):.4f}")
    return 0


def cmd_predict(args) -> int:
    model = _load_model(args.ckpt)
    context = _load_table(args.context, need_target=True)
    test = _load_table(args.input)
    seed = resolve_seed(args.seed)
    if args.method == "model":
        result = predict(model, context, test)
    elif args.method == "retrieval":
        result, _ = predict_retrieval(model, context, test, k=args.k)
    else:
        result = ensemble_predict(model, context, test,
                                  n_pipelines=args.pipelines, seed=seed)
    for note in result.notes:
        print(f"note: {note}")
    if result.kind == "cls":
        header = ["prediction"] + [f"p_{lab}" for lab in result.labels]
        rows = [[result.labels[int(result.point[i])]] + list(result.probs[i])
                for i in range(len(result.point))]
    else:
        header = ["prediction"]
        rows = [[v] for v in result.point]
    write_rows(args.out, header, rows)
    print(f"wrote {args.out}: {len(rows)} predictions ({args.method})")
    return 0


def cmd_impute(args) -> int:
    model = _load_model(args.ckpt)
    table = _load_table(args.input)
    result = impute(model, table)
    for note in result.notes:
        print(f"note: {note}")
    save_csv(result.table, args.out)
    print(f"wrote {args.out}: filled {int(result.filled.sum())} cells")
    return 0


def cmd_synth(args) -> int:
    model = _load_model(args.ckpt)
    table = _load_table(args.input)
    rng = np.random.default_rng(resolve_seed(args.seed))
    synth = generate(model, table, args.rows, rng=rng,
                     refine_rounds=args.refine_rounds)
    save_csv(synth, args.out)
    print(f"wrote {args.out}: {synth.m} synthetic rows")
    return 0


def cmd_oracle(args) -> int:
    rng = np.random.default_rng(resolve_seed(args.seed))
    rows = []
    devs = []
    for trial in range(args.trials):
        d = int(rng.choice(args.dims))
        omega = int(rng.choice(args.levels))
        k = int(rng.integers(1, d + 1))
        joint = random_joint(d, omega, rng)
        rebuilt = joint_from_conditionals(conditionals_from_joint(joint, k))
        dev = float(np.max(np.abs(rebuilt.probs - joint.probs)))
        rows.append([trial, d, omega, k, dev])
        devs.append(dev)
    write_rows(args.out, ["trial", "d", "levels", "mask_size", "deviation"],
               rows)
    plots.deviation_hist(np.asarray(devs), _sibling(args.out, ".png"))
    p, q, shared_dev = single_mask_gap()
    print(f"wrote {args.out}: {args.trials} round-trips, "
          f"max deviation {max(devs):.3e}")
    print(f"witness: two joints share one conditional to {shared_dev:.1e} "
          f"yet differ by TV {total_variation(p, q):.3f}")
    return 0


def cmd_eval(args) -> int:
    model = _load_model(args.ckpt)
    paths = sorted(Path(args.suite).glob("*.csv"))
    if not paths:
        raise SystemExit(f"no CSV files under {args.suite}")
    named = [(p.stem, _load_table(p, need_target=True)) for p in paths]
    seed = resolve_seed(args.seed)
    rows, summary, methods = evaluate_suite(model, named, args.task, seed=seed)
    metric_cols = ["auc", "accuracy", "f1"] if args.task == "cls" else ["nrmse", "r2"]
    flat = []
    for i, (name, _) in enumerate(named):
        for j, method in enumerate(methods):
            row = rows[i * len(methods) + j]
            flat.append([name, method] + [row[c] for c in metric_cols]
                        + [summary.ranks[i, j]])
    write_rows(args.out, ["dataset", "method"] + metric_cols + ["rank"], flat)
    write_rows(_sibling(args.out, "_ranks.csv"),
               ["method", "mean_rank", "mrr"],
               [[m, summary.mean_rank[j], summary.mrr[j]]
                for j, m in enumerate(methods)])
    plots.rank_bars(list(methods), summary.mean_rank,
                    _sibling(args.out, "_ranks.png"))
    best = methods[int(np.argmin(summary.mean_rank))]
    print(f"wrote {args.out}: {len(named)} datasets x {len(methods)} methods; "
          f"best mean rank: {best}")
    return 0


def cmd_robustness(args) -> int:
    model = _load_model(args.ckpt)
    table = _load_table(args.input, need_target=True)
    task = "cls" if table.columns[table.target].kind == CATEGORICAL else "reg"
    seed = resolve_seed(args.seed)
    levels = [0.0] + [lv for lv in args.level if lv != 0.0]
    metric = "auc" if task == "cls" else "nrmse"
    flat = []
    by_method: dict[str, list[float]] = {}
    for level in levels:
        if level == 0.0:
            perturbed = table
        elif args.mode == "uninformative":
            perturbed = perturb_uninformative(
                table, level, np.random.default_rng([seed, int(level * 1e6)]))
        else:
            perturbed = perturb_outliers(
                table, prob=level, factor=args.factor,
                rng=np.random.default_rng([seed, int(level * 1e6)]))
        try:
            scores = evaluate_table(model, perturbed, task, seed=seed)
        except ValueError as exc:
            raise SystemExit(f"level {level}: {exc}") from None
        for method, vals in scores.items():
            flat.append([level, method] + list(vals.values()))
            by_method.setdefault(method, []).append(vals[metric])
    metric_cols = ["auc", "accuracy", "f1"] if task == "cls" else ["nrmse", "r2"]
    write_rows(args.out, ["level", "method"] + metric_cols, flat)
    plots.robustness_curves(levels, by_method, metric, _sibling(args.out, ".png"))
    print(f"wrote {args.out}: {args.mode} levels {levels} ({metric} per method)")
    return 0


def cmd_scaling_fit(args) -> int:
    with open(args.input, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        data = [row for row in reader]
    if args.metric not in header:
        raise SystemExit(f"{args.input} has no column {args.metric!r} "
                         f"(columns: {', '.join(header)})")
    ycol = header.index(args.metric)
    n = np.array([float(row[0]) for row in data])
    y = np.array([float(row[ycol]) for row in data])
    try:
        fit = scaling_fit(np.column_stack([n, y]))
    except ValueError as exc:
        raise SystemExit(str(exc)) from None
    print(f"a={float(fit.a)!r} b={float(fit.b)!r} c={float(fit.c)!r} "
          f"r2={float(fit.r2)!r} "
          f"degenerate={fit.degenerate}")
    if args.out:
        write_rows(args.out, ["a", "b", "c", "r2", "degenerate"],
                   [[fit.a, fit.b, fit.c, fit.r2, fit.degenerate]])
        plots.scaling_curve(n, y, fit, _sibling(args.out, ".png"))
        print(f"wrote {args.out}")
    return 0


def cmd_finetune(args) -> int:
    model = _load_model(args.ckpt)
    table = _load_table(args.input, need_target=True)
    cfg = FinetuneConfig(steps=args.steps, k=args.k, lr=args.lr,
                         seed=resolve_seed(args.seed),
                         pool_fraction=args.pool_fraction,
                         loss_scope=args.scope)
    try:
        tuned, history = finetune(model, table, cfg)
    except ValueError as exc:
        raise SystemExit(str(exc)) from None
    tuned.save(args.out)
    if history:
        write_rows(_sibling(args.out, "_history.csv"),
                   ["step", "query", "loss", "cells"],
                   [[h["step"], h["query"], h["loss"], h["cells"]]
                    for h in history])
        plots.loss_curve(history, _sibling(args.out, "_loss.png"))
        tail = [h["loss"] for h in history[-20:] if np.isfinite(h["loss"])]
        print(f"wrote {args.out} after {args.steps} steps; "
              f"mean loss over last 20: {np.mean(tail):.4f}")
    else:
        print(f"wrote {args.out} (no steps taken)")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tabldm",
        description="synthetic-table in-context learner: data forge, "
                    "pretraining, conditional inference, and evaluation")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=func)
        p.add_argument("--seed", type=int, default=None,
                       help=f"RNG seed (default: ${SEED_ENV} or 0)")
        return p

    p = add("gen", cmd_gen, "draw one synthetic dataset")
    p.add_argument("--rows", type=int, default=256)
    p.add_argument("--features", type=_int_pair, default=(2, 8),
                   metavar="LO,HI")
    p.add_argument("--task", choices=("auto", "cls", "reg"), default="auto")
    p.add_argument("--classes", type=int, default=None,
                   help="fixed class count for cls tasks")
    p.add_argument("--out", required=True)

    p = add("episodes", cmd_episodes, "split a dataset into a masked episode")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--ctx-fraction", type=float, default=0.7)
    p.add_argument("--mask-ratio", type=_float_pair, default=(0.1, 0.4),
                   metavar="LO,HI")
    p.add_argument("--out-dir", required=True)

    p = add("pretrain", cmd_pretrain, "train a fresh model on synthetic data")
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--blocks", type=int, default=3)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--feature-passes", type=int, default=2)
    p.add_argument("--value-bins", type=int, default=32)
    p.add_argument("--max-columns", type=int, default=32)
    p.add_argument("--max-classes", type=int, default=10)
    p.add_argument("--precision", type=int, choices=(32, 64), default=32)
    p.add_argument("--rows", type=int, default=192,
                   help="rows per streamed dataset")
    p.add_argument("--features", type=_int_pair, default=(2, 8),
                   metavar="LO,HI")
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--warmup", type=int, default=100)
    p.add_argument("--lr-decay", choices=("none", "cosine"), default="none")
    p.add_argument("--episodes-per-step", type=int, default=1,
                   help="episodes averaged into each gradient step")
    p.add_argument("--target-focus", type=float, default=0.0,
                   help="fraction of episodes that mask the target column first")
    p.add_argument("--log-every", type=int, default=50)
    p.add_argument("--out", required=True)

    p = add("predict", cmd_predict, "score a test CSV against a context CSV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--context", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--method", choices=("model", "retrieval", "ensemble"),
                   default="model")
    p.add_argument("--k", type=int, default=None,
                   help="retrieved context size (retrieval method)")
    p.add_argument("--pipelines", type=int, default=None,
                   help="ensemble size (ensemble method)")
    p.add_argument("--out", required=True)

    p = add("impute", cmd_impute, "fill the missing cells of a CSV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)

    p = add("synth", cmd_synth, "sample new rows conditioned on a dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--rows", type=int, default=100)
    p.add_argument("--refine-rounds", type=int, default=3)
    p.add_argument("--out", required=True)

    p = add("oracle", cmd_oracle, "exact reconstruction round-trips")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--dims", type=_int_list, default=[2, 3, 4], metavar="D,..")
    p.add_argument("--levels", type=_int_list, default=[2, 3], metavar="K,..")
    p.add_argument("--out", default="oracle_report.csv")

    p = add("eval", cmd_eval, "run the method suite over a dataset directory")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--suite", required=True, help="directory of dataset CSVs")
    p.add_argument("--task", choices=("cls", "reg"), required=True)
    p.add_argument("--out", required=True)

    p = add("robustness", cmd_robustness, "evaluate under perturbations")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--mode", choices=("uninformative", "outliers"),
                   required=True)
    p.add_argument("--level", type=_float_list, required=True,
                   metavar="L[,L..]",
                   help="shuffled-copy fraction or outlier cell probability")
    p.add_argument("--factor", type=float, default=100.0,
                   help="outlier magnitude cap")
    p.add_argument("--out", default="robustness_report.csv")

    p = add("scaling-fit", cmd_scaling_fit, "fit a power-plus-floor curve")
    p.add_argument("--in", dest="input", required=True,
                   help="CSV whose first column is the size axis")
    p.add_argument("--metric", required=True, help="metric column to fit")
    p.add_argument("--out", default=None)

    p = add("finetune", cmd_finetune, "adapt a checkpoint to one dataset")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--k", type=int, default=16)
    p.add_argument("--lr", type=float, default=3e-4)
    p.add_argument("--pool-fraction", type=float, default=0.8)
    p.add_argument("--scope", choices=("target", "all"), default="target")
    p.add_argument("--out", required=True)

    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    argv = splice_config(argv)
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
