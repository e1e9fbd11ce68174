"""Command-line driver: ``stadv {train,attack,defend,viz,metrics}``.

Every output file carries the full run configuration (all flags, defaults
included). Randomness comes from ``--seed`` through independent streams:
``[seed, 0]`` orders the test inputs, ``[seed, 1]`` draws attack targets,
``[seed, 2]`` drives PGD random starts. Training uses ``--seed`` directly.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from ._alloc import keep_heap
from .attacks import (
    adaptive_blur_attack,
    cw_attack,
    default_tau_grid,
    fgsm_attack,
    pgd_attack,
    stadv_attack,
    stadv_attack_gridsearch,
)
from .datasets import load_cifar10, load_mnist
from .defenses import DEFENSES, evaluate_defense
from .losses import FLOW_UNITS, AttackObjectiveConfig
from .metrics import mean_std
from .models import MODEL_NAMES, build_model, predict
from .persist import (
    export_flow_svg,
    export_image,
    load_weights,
    outcome_record,
    read_results,
    save_weights,
    write_results,
)
from .solver import LbfgsConfig
from .trainer import TrainConfig, accuracy, train

log = logging.getLogger("stadv")

METHODS = ("stadv", "fgsm", "cw", "pgd", "stadv-adaptive")
ADV_MODES = ("none", "fgsm", "ensemble", "pgd")


class CliError(Exception):
    """A failure reported as one line on stderr with a nonzero exit."""


# --- argument parsing -----------------------------------------------------------


def _tau_grid(text):
    try:
        lo, hi, n = text.split(":")
        lo, hi, n = float(lo), float(hi), int(n)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected lo:hi:n, got {text!r}") from None
    if not (0 < lo <= hi) or n < 1:
        raise argparse.ArgumentTypeError(f"need 0 < lo <= hi and n >= 1, got {text!r}")
    return default_tau_grid(lo, hi, n) if n > 1 else [hi]


def _nonneg_int(text):
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"must be >= 0, got {v}")
    return v


def _add_data(p):
    p.add_argument("--data", required=True, help="directory with IDX (MNIST) or binary (CIFAR-10) files")
    p.add_argument("--model", choices=MODEL_NAMES, default="A")


def _add_attack_opts(p):
    p.add_argument("--n", type=_nonneg_int, default=100, help="correctly classified test inputs to attack")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tau", type=float, default=0.05)
    p.add_argument("--kappa", type=float, default=0.0)
    p.add_argument("--flow-units", choices=FLOW_UNITS, default="grid",
                   help="coordinates for the flow smoothness term and reported flow metrics")
    p.add_argument("--tau-grid", type=_tau_grid, default=None, metavar="LO:HI:N")
    p.add_argument("--epsilon", type=float, default=0.3, help="L-inf budget for fgsm/pgd (pixels in [0,1])")
    p.add_argument("--untargeted", action="store_true", help="attack any wrong class instead of a random target")
    p.add_argument("--max-iter", type=int, default=300, help="L-BFGS iterations for stadv and cw")
    p.add_argument("--cw-rounds", type=int, default=5)
    p.add_argument("--cw-c", type=float, default=1.0)
    p.add_argument("--pgd-steps", type=int, default=10)
    p.add_argument("--pgd-step-size", type=float, default=None)
    p.add_argument("--blur-kernel", type=int, default=3)


def build_parser():
    parser = argparse.ArgumentParser(prog="stadv", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("train", help="train a classifier and save its weights")
    _add_data(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--adv", choices=ADV_MODES, default="none")
    p.add_argument("--epochs", type=_nonneg_int, default=5)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--optimizer", choices=("adam", "sgd-momentum"), default="adam")
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epsilon", type=float, default=0.3)
    p.add_argument("--pgd-steps", type=int, default=10)
    p.add_argument("--pgd-step-size", type=float, default=0.1)
    p.add_argument("--source-models", nargs="+", default=[], metavar="WEIGHTS",
                   help="weight files of fixed models used by --adv ensemble")
    p.add_argument("--train-limit", type=_nonneg_int, default=2000)
    p.add_argument("--test-limit", type=_nonneg_int, default=1000)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack", help="attack correctly classified test inputs")
    _add_data(p)
    p.add_argument("--weights", required=True)
    p.add_argument("--method", choices=METHODS, default="stadv")
    p.add_argument("--out", required=True)
    p.add_argument("--test-limit", type=_nonneg_int, default=1000)
    _add_attack_opts(p)
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("defend", help="attack x defense success/recovery matrix")
    _add_data(p)
    p.add_argument("--weights", required=True, help="weights of the undefended model")
    p.add_argument("--defense", nargs="+", choices=DEFENSES, default=["none", "blur"])
    p.add_argument("--defended-weights", nargs="*", default=[], metavar="DEFENSE=PATH",
                   help="weights of adversarially trained models, e.g. advtrain-fgsm=fgsm.w")
    p.add_argument("--methods", nargs="+", choices=METHODS, default=["fgsm", "cw", "stadv"])
    p.add_argument("--out", required=True)
    p.add_argument("--test-limit", type=_nonneg_int, default=1000)
    _add_attack_opts(p)
    p.set_defaults(func=cmd_defend)

    p = sub.add_parser("viz", help="benign/adversarial montages and flow plots from an attack run")
    p.add_argument("--run", required=True, help="output directory of an attack run")
    p.add_argument("--out", default=None, help="defaults to <run>/viz")
    p.add_argument("--limit", type=_nonneg_int, default=None)
    p.add_argument("--stride", type=int, default=2)
    p.set_defaults(func=cmd_viz)

    p = sub.add_parser("metrics", help="flow TV / L2 mean and std over a results file")
    p.add_argument("--results", required=True)
    p.add_argument("--all", action="store_true", help="include failed attacks (default: successes only)")
    p.add_argument("--out", default=None, help="also write the summary as JSON lines")
    p.set_defaults(func=cmd_metrics)
    return parser


def run_config(args):
    cfg = {k: v for k, v in vars(args).items() if k not in ("func", "verbose")}
    cfg["version"] = __version__
    return cfg


def _header_text(cfg):
    return "run_config " + json.dumps(cfg, sort_keys=True)


# --- helpers ----------------------------------------------------------------


def _load_split(args, split, limit):
    path = Path(args.data)
    if not path.is_dir():
        raise CliError(f"dataset directory not found: {path}")
    loader = load_cifar10 if args.model == "resnet_small" else load_mnist
    try:
        return loader(path, split, limit=limit)
    except FileNotFoundError as err:
        raise CliError(str(err)) from err


def _load_model(name, path):
    path = Path(path)
    if not path.is_file():
        raise CliError(f"weight file not found: {path}")
    model = build_model(name)
    load_weights(model, path)
    return model


def select_inputs(model, data, n, seed):
    """First ``n`` correctly classified test inputs in a seeded random order."""
    order = np.random.default_rng([seed, 0]).permutation(len(data))
    if n == 0 or len(order) == 0:
        return np.zeros(0, dtype=np.intp)
    preds = predict(model, data.images[order])
    good = order[preds == data.labels[order]]
    return good[:n]


def draw_targets(labels, seed, num_classes=10):
    rng = np.random.default_rng([seed, 1])
    out = []
    for y in labels:
        t = int(rng.integers(num_classes - 1))
        out.append(t + (t >= y))
    return out


def run_attack(method, model, x, y, target, args, rng):
    solver = LbfgsConfig(max_iterations=args.max_iter)
    if method in ("stadv", "stadv-adaptive"):
        cfg = AttackObjectiveConfig(true_class=y, target_class=target, tau=args.tau, kappa=args.kappa,
                                    flow_units=args.flow_units)
        if method == "stadv-adaptive":
            return adaptive_blur_attack(model, x, cfg, solver, kernel=args.blur_kernel)
        if args.tau_grid:
            return stadv_attack_gridsearch(model, x, cfg, args.tau_grid, solver)
        return stadv_attack(model, x, cfg, solver)
    if method == "fgsm":
        return fgsm_attack(model, x, y, args.epsilon, target=target)
    if method == "pgd":
        return pgd_attack(model, x, y, args.epsilon, args.pgd_steps, args.pgd_step_size, rng=rng, target=target)
    return cw_attack(
        model, x, target=target, kappa=args.kappa, c_weight=args.cw_c, y_true=y,
        search_rounds=args.cw_rounds, solver_cfg=solver,
    )


def attack_batch(method, model, data, idx, targets, args):
    rng = np.random.default_rng([args.seed, 2])
    outcomes = []
    for k, (i, t) in enumerate(zip(idx, targets)):
        out = run_attack(method, model, data.images[i], int(data.labels[i]), t, args, rng)
        outcomes.append(out)
        log.info("%s %d/%d input %d success=%s", method, k + 1, len(idx), i, out.success)
    return outcomes


def summarize(records):
    """Per-method rows: count, successes, rate, and flow metric means over successes."""
    rows = {}
    for r in records:
        row = rows.setdefault(r["method"], {"n": 0, "success": 0, "tv": [], "l2": []})
        row["n"] += 1
        if r["success"]:
            row["success"] += 1
            if r.get("flow_tv") is not None:
                row["tv"].append(r["flow_tv"])
                row["l2"].append(r["flow_l2"])
    return rows


def format_summary(rows):
    lines = [f"{'method':<16}{'n':>6}{'success':>9}{'rate':>9}{'flow_tv':>12}{'flow_l2':>12}"]
    for method, row in rows.items():
        rate = row["success"] / row["n"] if row["n"] else 0.0
        tv = f"{mean_std(row['tv'])[0]:.3e}" if row["tv"] else "-"
        l2 = f"{mean_std(row['l2'])[0]:.3e}" if row["l2"] else "-"
        lines.append(f"{method:<16}{row['n']:>6}{row['success']:>9}{rate:>9.4f}{tv:>12}{l2:>12}")
    return "\n".join(lines)


# --- subcommands ----------------------------------------------------------------


def cmd_train(args):
    cfg_record = run_config(args)
    train_data = _load_split(args, "train", args.train_limit)
    test_data = _load_split(args, "test", args.test_limit)
    sources = [_load_model(args.model, p) for p in args.source_models]
    cfg = TrainConfig(
        epochs=args.epochs, batch_size=args.batch_size, learning_rate=args.lr, optimizer=args.optimizer,
        momentum=args.momentum, seed=args.seed, adversarial_mode=args.adv, epsilon=args.epsilon,
        pgd_steps=args.pgd_steps, pgd_step_size=args.pgd_step_size, ensemble_source_models=sources,
    )
    model = build_model(args.model, seed=args.seed)
    report = train(model, train_data, cfg, test_data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"run_config": cfg_record, "test_accuracy": report.test_accuracy, "data_checksum": train_data.checksum}
    save_weights(model, out / "weights.w", meta=meta)
    write_results([report], out / "train_report.jsonl", run_config=cfg_record)
    print(f"{args.model} adv={args.adv} epochs={args.epochs} test accuracy {report.test_accuracy:.4f} "
          f"({report.wall_time:.1f}s) -> {out / 'weights.w'}")
    return 0


def _save_bundle(path, data, idx, outcomes):
    h, w = data.images.shape[1:3]
    flows = np.stack([o.flow if o.flow is not None else np.zeros((h, w, 2)) for o in outcomes]) if outcomes else np.zeros((0, h, w, 2))
    adv = np.stack([o.image for o in outcomes]) if outcomes else np.zeros((0,) + data.images.shape[1:])
    np.savez_compressed(
        path,
        index=np.asarray(idx, dtype=np.int64),
        benign=data.images[idx],
        adversarial=adv,
        flow=flows,
        label=data.labels[idx],
        target=np.array([-1 if o.target is None else o.target for o in outcomes], dtype=np.int64),
        success=np.array([o.success for o in outcomes], dtype=bool),
        method=np.array([o.method for o in outcomes]),
    )


def cmd_attack(args):
    cfg = run_config(args)
    header = _header_text(cfg)
    model = _load_model(args.model, args.weights)
    data = _load_split(args, "test", args.test_limit)
    idx = select_inputs(model, data, args.n, args.seed)
    targets = [None] * len(idx) if args.untargeted else draw_targets(data.labels[idx], args.seed, model.num_classes)
    outcomes = attack_batch(args.method, model, data, idx, targets, args)

    out = Path(args.out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    records = [outcome_record(o, args.model, "none", args.seed, int(i)) for o, i in zip(outcomes, idx)]
    records.sort(key=lambda r: r["index"])
    for o, i in zip(outcomes, idx):
        export_image(o.image, out / "images" / f"{int(i):05d}_{args.method}.pgm", model.pixel_range, header)
        if o.flow is not None:
            (out / "flows").mkdir(exist_ok=True)
            export_flow_svg(o.flow, data.images[i], out / "flows" / f"{int(i):05d}.svg",
                            pixel_range=model.pixel_range, comment=header)
    write_results(records, out / "results.jsonl", run_config=cfg)
    _save_bundle(out / "outcomes.npz", data, idx, outcomes)
    print(format_summary(summarize(records)))
    return 0


def _parse_defended(items):
    out = {}
    for item in items:
        name, sep, path = item.partition("=")
        if not sep or name not in DEFENSES or not name.startswith("advtrain"):
            raise CliError(f"--defended-weights expects advtrain-*=PATH, got {item!r}")
        out[name] = path
    return out


def cmd_defend(args):
    cfg = run_config(args)
    defended = _parse_defended(args.defended_weights)
    missing = [d for d in args.defense if d.startswith("advtrain") and d not in defended]
    if missing:
        raise CliError(f"no --defended-weights given for {', '.join(missing)}")
    base = _load_model(args.model, args.weights)
    data = _load_split(args, "test", args.test_limit)

    reports = []
    base_runs = {}
    for defense in args.defense:
        model = base if defense in ("none", "blur") else _load_model(args.model, defended[defense])
        idx = select_inputs(model, data, args.n, args.seed)
        labels = data.labels[idx]
        targets = [None] * len(idx) if args.untargeted else draw_targets(labels, args.seed, model.num_classes)
        outcomes = []
        for method in args.methods:
            key = (id(model), method)
            if key not in base_runs:
                base_runs[key] = attack_batch(method, model, data, idx, targets, args)
            outcomes.extend(base_runs[key])
        report = evaluate_defense(model, "blur" if defense == "blur" else "none", outcomes,
                                  [int(y) for m in args.methods for y in labels], seed=args.seed)
        report.defense = defense
        if defense.startswith("advtrain"):
            report.notes = f"attacks run against {defended[defense]}"
        reports.append(report)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_results(reports, out / "defense_report.jsonl", run_config=cfg)
    print(format_defense_table(reports, args.methods))
    return 0


def format_defense_table(reports, methods):
    """Rows are attacks, columns are defenses: 'success% / recovered%'."""
    head = f"{'attack':<16}" + "".join(f"{r.defense:>22}" for r in reports)
    lines = [head]
    for m in methods:
        cells = []
        for r in reports:
            if m in r.success_rates:
                cells.append(f"{100 * r.success_rates[m]:6.2f}% / {100 * r.recovered_accuracy[m]:6.2f}%")
            else:
                cells.append("-")
        lines.append(f"{m:<16}" + "".join(f"{c:>22}" for c in cells))
    lines.append("cells: attack success under defense / recovered accuracy")
    return "\n".join(lines)


def cmd_viz(args):
    run = Path(args.run)
    bundle = run / "outcomes.npz"
    if not bundle.is_file():
        raise CliError(f"attack bundle not found: {bundle}")
    cfg, _ = read_results(run / "results.jsonl") if (run / "results.jsonl").is_file() else (None, [])
    header = _header_text({"viz": run_config(args), "attack": cfg})
    out = Path(args.out) if args.out else run / "viz"
    out.mkdir(parents=True, exist_ok=True)
    z = np.load(bundle)
    count = len(z["index"]) if args.limit is None else min(args.limit, len(z["index"]))
    for k in range(count):
        benign, adv = z["benign"][k], z["adversarial"][k]
        gap = np.ones((benign.shape[0], 1, benign.shape[2]))
        montage = np.concatenate([benign, gap, adv], axis=1)
        name = f"{int(z['index'][k]):05d}_{z['method'][k]}"
        export_image(montage, out / f"{name}_montage.pgm" if benign.shape[2] == 1 else out / f"{name}_montage.ppm",
                     comment=header)
        if str(z["method"][k]).startswith("stadv"):
            export_flow_svg(z["flow"][k], benign, out / f"{name}_flow.svg", stride=args.stride, comment=header)
    print(f"wrote {count} montages to {out}")
    return 0


def flow_metric_summary(records, include_failures=False):
    rows = [r for r in records if r.get("flow_tv") is not None and (include_failures or r["success"])]
    tv = mean_std(r["flow_tv"] for r in rows)
    l2 = mean_std(r["flow_l2"] for r in rows)
    return {"count": len(rows), "flow_tv": tv, "flow_l2": l2}


def _sci(x):
    mant, exp = f"{x:.2e}".split("e")
    return f"{mant}e{int(exp):+03d}"


def cmd_metrics(args):
    path = Path(args.results)
    if not path.is_file():
        raise CliError(f"results file not found: {path}")
    cfg, records = read_results(path)
    s = flow_metric_summary(records, args.all)
    scope = "all stAdv records" if args.all else "successful stAdv records"
    print(f"{scope}: {s['count']}")
    print(f"flow TV  {_sci(s['flow_tv'][0])} ± {_sci(s['flow_tv'][1])}")
    print(f"flow L2  {_sci(s['flow_l2'][0])} ± {_sci(s['flow_l2'][1])}")
    if args.out:
        write_results([{"scope": scope, **s}], args.out, run_config={"metrics": run_config(args), "attack": cfg})
    return 0


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "adv", None) == "ensemble" and not args.source_models:
        parser.error("--adv ensemble needs --source-models")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    keep_heap()
    started = time.perf_counter()
    try:
        code = args.func(args)
    except (CliError, OSError, ValueError) as err:
        print(f"stadv {args.subcommand}: error: {err}", file=sys.stderr)
        return 1
    log.info("done in %.1fs", time.perf_counter() - started)
    return code


if __name__ == "__main__":
    sys.exit(main())
