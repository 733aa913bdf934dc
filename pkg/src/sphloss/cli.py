"""Command-line interface.

Subcommands: gradcheck (finite-difference verification of every loss),
bound-eval (upper-bound validity/tightness report and the bound-training
probe), train (single or multi-seed training runs), bench (output-layer
per-step latency).  Exit codes: 0 success, 1 assertion/quality failure,
2 usage error.
"""

from __future__ import annotations

import argparse
import csv
import math
import statistics
import sys
from pathlib import Path

import numpy as np

from . import bound, config, data, fast_output, losses, trainer

GRADCHECK_LOSSES = (
    "log_softmax",
    "log_softmax_abs",
    "mse",
    "log_spherical",
    "log_taylor",
    "spherical_bound",
)


def _loss_grad_fns(name: str, eps: float, xi: float):
    """(loss_value_fn, analytic_grad_fn) pair for gradcheck."""
    if name == "log_softmax":
        return (lambda o, c: losses.log_softmax_loss(o, c).loss,
                lambda o, c: losses.log_softmax_loss(o, c).grad_o)
    if name == "log_softmax_abs":
        return (lambda o, c: losses.log_softmax_abs_loss(o, c).loss,
                lambda o, c: losses.log_softmax_abs_loss(o, c).grad_o)
    if name == "mse":
        return (lambda o, c: losses.mse_loss(o, c).loss,
                lambda o, c: losses.mse_loss(o, c).grad_o)
    if name == "log_spherical":
        return (lambda o, c: losses.log_spherical_softmax_loss(o, c, eps).loss,
                lambda o, c: losses.log_spherical_softmax_loss(o, c, eps).grad_o)
    if name == "log_taylor":
        return (lambda o, c: losses.log_taylor_softmax_loss(o, c).loss,
                lambda o, c: losses.log_taylor_softmax_loss(o, c).grad_o)
    if name == "spherical_bound":
        xp = bound.XiParam(xi=xi, mode="fixed")
        return (lambda o, c: bound.spherical_bound_loss(o, c, xp).loss,
                lambda o, c: bound.spherical_bound_loss(o, c, xp).grad_o)
    raise KeyError(name)


def max_rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(float(np.abs(analytic).max()), float(np.abs(numeric).max()), 1e-12)
    return float(np.abs(analytic - numeric).max()) / scale


def gradcheck_trials(name: str, D: int, trials: int, seed: int,
                     eps: float, xi: float, tol: float = 1e-5):
    """Yield (trial, err) rows; abs-loss samples avoid |o_i| < 1e-3 kinks."""
    loss_fn, grad_fn = _loss_grad_fns(name, eps, xi)
    rng = np.random.default_rng(seed)
    for t in range(trials):
        while True:
            o = rng.uniform(-3.0, 3.0, size=D)
            if name != "log_softmax_abs" or np.abs(o).min() >= 1e-3:
                break
        c = int(rng.integers(D))
        analytic = grad_fn(o, c)
        numeric = losses.finite_diff_grad(lambda v: loss_fn(v, c), o, c)
        yield t, max_rel_err(analytic, numeric)


def cmd_gradcheck(args) -> int:
    names = GRADCHECK_LOSSES if args.loss == "all" else (args.loss,)
    for name in names:
        if name not in GRADCHECK_LOSSES:
            print(f"error: unknown loss {name!r}; choose from "
                  f"{', '.join(GRADCHECK_LOSSES)} or 'all'", file=sys.stderr)
            return 2
    dims = [int(x) for x in args.dims.split(",")]
    rows = []
    worst = ("", 0, -1.0)
    ok = True
    for name in names:
        for D in dims:
            for t, err in gradcheck_trials(name, D, args.trials, args.seed,
                                           args.eps, args.xi):
                rows.append((name, D, t, err))
                if err > worst[2]:
                    worst = (name, D, err)
                if err >= 1e-5:
                    ok = False
    out = _open_out(args.output)
    w = csv.writer(out)
    w.writerow(["loss", "D", "trial", "max_rel_err"])
    w.writerows(rows)
    _close_out(out)
    if not ok:
        print(f"FAIL: worst offender loss={worst[0]} D={worst[1]} "
              f"max_rel_err={worst[2]:.3e} (tolerance 1e-5)", file=sys.stderr)
        return 1
    print(f"gradcheck OK: {len(rows)} trials, worst max_rel_err={worst[2]:.3e}")
    return 0


def cmd_bound_eval(args) -> int:
    if args.train_probe:
        return _bound_train_probe(args)
    rng = np.random.default_rng(args.seed)
    dims = [int(x) for x in args.dims.split(",")]
    rows = []
    gaps = []
    for _ in range(args.samples):
        D = dims[int(rng.integers(len(dims)))]
        o = rng.uniform(-3.0, 3.0, size=D)
        c = int(rng.integers(D))
        if args.xi_mode == "optimized":
            xp = bound.XiParam(mode="per_example_optimized")
        else:
            xp = bound.XiParam(xi=args.xi, mode="fixed")
        res = bound.spherical_bound_loss(o, c, xp)
        rows.append((res.bound.true_loss, res.bound.bound, res.bound.gap))
        gaps.append(res.bound.gap)
    out = _open_out(args.output)
    w = csv.writer(out)
    w.writerow(["true_loss", "bound", "gap"])
    w.writerows(rows)
    _close_out(out)
    mean_gap = statistics.fmean(gaps)
    print(f"samples={args.samples} xi_mode={args.xi_mode} mean_gap={mean_gap:.6f} "
          f"min_gap={min(gaps):.3e}")
    if min(gaps) < -1e-9:
        print("FAIL: bound fell below the true loss", file=sys.stderr)
        return 1
    return 0


def _bound_train_probe(args) -> int:
    """Train a linear softmax model by minimizing the bound; report whether
    the true negative log-likelihood improved.  Report-only (exit 0)."""
    ds = data.synthetic_categorical(D=100, input_dim=20, N=6000,
                                    zipf_exponent=1.0, seed=args.seed,
                                    separation=2.0)
    splits = data.random_split(ds, data.SplitSpec(4000, 1000, 1000, seed=args.seed))
    spec = trainer.MLPSpec(input_dim=20, hidden_dims=(), output_dim=100)
    kind = ("spherical_bound_optimized" if args.xi_mode == "optimized"
            else "spherical_bound_fixed")
    cfg = trainer.TrainConfig(loss_kind=kind, initial_lr=0.01, max_epochs=15,
                              xi=args.xi, seed=args.seed, prior_bias_init=True,
                              batch_size=200)
    (Xtr, ytr) = splits[0].features, splits[0].labels
    (Xva, yva) = splits[1].features, splits[1].labels
    (Xte, yte) = splits[2].features, splits[2].labels
    rng = np.random.default_rng(cfg.seed)
    freqs = np.bincount(ytr, minlength=100) / len(ytr)
    model0 = trainer.MLP(spec, rng, class_freqs=freqs, loss_kind=kind,
                         prior_bias_init=True, n_examples=len(ytr))
    negll0, err0, _, bound0 = trainer.evaluate(model0, Xte, yte, kind, xi=cfg.xi)
    m = trainer.train(spec, cfg, (((Xtr, ytr)), (Xva, yva), (Xte, yte)))
    print("bound-training probe (minimizing the upper bound on -log softmax):")
    print(f"  initial: negll={negll0:.4f} bound={bound0:.4f} error={err0:.4f}")
    print(f"  final:   negll={m.test_negll:.4f} bound={m.test_loss:.4f} "
          f"error={m.test_error:.4f}")
    delta = negll0 - m.test_negll
    print(f"  negll improvement: {delta:+.4f} nats "
          f"(bound went down by {bound0 - m.test_loss:+.4f})")
    if delta < 0.05:
        print("  finding: minimizing the bound did not meaningfully improve the "
              "true negative log-likelihood over the prior-matched init")
    return 0


def cmd_train(args) -> int:
    cfg_dict = config.load_config(args.config) if args.config else config.default_config()
    for setting in args.set or []:
        if "=" not in setting:
            print(f"error: --set expects key=value, got {setting!r}", file=sys.stderr)
            return 2
        k, v = setting.split("=", 1)
        config.apply_setting(cfg_dict, k.strip(), v.strip())

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "effective_config.txt").write_text(config.dump_config(cfg_dict))

    try:
        splits_np, D, input_dim = _load_splits(cfg_dict)
    except FileNotFoundError as e:
        print(f"error: dataset file not found: {e.filename}. Provide MNIST IDX "
              f"paths via mnist_* config keys or use dataset=synthetic.",
              file=sys.stderr)
        return 1

    spec = trainer.MLPSpec(input_dim=input_dim,
                           hidden_dims=tuple(cfg_dict["hidden_dims"]),
                           output_dim=D)
    seeds = [cfg_dict["seed"] + i for i in range(args.seeds)]
    results = []
    for seed in seeds:
        tc = trainer.TrainConfig(
            loss_kind=cfg_dict["loss_kind"], initial_lr=cfg_dict["initial_lr"],
            momentum=cfg_dict["momentum"], batch_size=cfg_dict["batch_size"],
            patience=cfg_dict["patience"],
            lr_decay_factor=cfg_dict["lr_decay_factor"],
            max_epochs=cfg_dict["max_epochs"], seed=seed, eps=cfg_dict["eps"],
            xi=cfg_dict["xi"], output_layer=cfg_dict["output_layer"],
            prior_bias_init=cfg_dict["prior_bias_init"],
        )
        csv_path = out_dir / f"epochs_seed{seed}.csv"
        m = trainer.train(spec, tc, splits_np, csv_path=str(csv_path))
        (out_dir / f"run_seed{seed}.txt").write_text(
            trainer.format_run_record(m) + "\n")
        if m.diverged:
            print(f"ABORT seed={seed}: {m.diagnostic}", file=sys.stderr)
            return 1
        print(f"seed={seed}: test_negll={m.test_negll:.4f} "
              f"test_error={m.test_error:.4%} epochs={m.epochs_run}")
        results.append(m)

    neglls = [m.test_negll for m in results]
    errors = [m.test_error for m in results]
    epochs = [m.epochs_run for m in results]
    print()
    print(f"{'loss function':<24} | {'loss':<22} | {'error rate':<18} | epochs")
    print(_table_row(cfg_dict["loss_kind"], neglls, errors, epochs))
    return 0


def _table_row(kind: str, neglls, errors, epochs) -> str:
    label = "mse" if kind == "mse" else "negll"
    def sd(xs):
        return statistics.stdev(xs) if len(xs) > 1 else 0.0
    return (f"{kind:<24} | {label}: {statistics.fmean(neglls):.4f} ({sd(neglls):.4f})"
            f"{'':<2} | {statistics.fmean(errors):.3%} ({sd(errors):.3%}) | "
            f"{statistics.fmean(epochs):.0f} ({sd(epochs):.0f})")


def _load_splits(cfg):
    """Returns (((Xtr,ytr),(Xva,yva),(Xte,yte)), D, input_dim)."""
    if cfg["dataset"] == "synthetic":
        ds = data.synthetic_categorical(
            D=cfg["synth_D"], input_dim=cfg["synth_input_dim"], N=cfg["synth_N"],
            zipf_exponent=cfg["synth_zipf"], seed=cfg["synth_seed"],
            separation=cfg["synth_separation"],
        )
        n = len(ds)
        tr, va, te = (int(0.7 * n), int(0.15 * n), n - int(0.7 * n) - int(0.15 * n))
        parts = data.random_split(ds, data.SplitSpec(tr, va, te, seed=cfg["split_seed"]))
    elif cfg["dataset"] == "mnist":
        train = data.load_mnist(cfg["mnist_train_images"], cfg["mnist_train_labels"])
        test = data.load_mnist(cfg["mnist_test_images"], cfg["mnist_test_labels"])
        if cfg["split"] == "official":
            tr, va = data.random_split(
                train,
                data.SplitSpec(len(train) - cfg["valid_n"], cfg["valid_n"], 0,
                               seed=cfg["split_seed"]),
            )[:2]
            parts = (tr, va, test)
        else:
            full = data.concat(train, test)
            parts = data.random_split(
                full,
                data.SplitSpec(cfg["train_n"], cfg["valid_n"], cfg["test_n"],
                               seed=cfg["split_seed"]),
            )
    else:
        raise config.ConfigError(f"unknown dataset {cfg['dataset']!r}")
    splits = tuple((p.features, p.labels) for p in parts)
    return splits, parts[0].D, parts[0].features.shape[1]


def cmd_bench(args) -> int:
    D_list = [int(x) for x in args.D_list.split(",")]
    rows = fast_output.bench(D_list=D_list, d=args.d, steps=args.steps,
                             seed=args.seed)
    out = _open_out(args.output)
    w = csv.writer(out)
    w.writerow(["impl", "D", "d", "step_us_p50", "step_us_p90", "steps"])
    for r in rows:
        w.writerow([r["impl"], r["D"], r["d"],
                    f"{r['step_us_p50']:.2f}", f"{r['step_us_p90']:.2f}", r["steps"]])
    _close_out(out)
    return 0


def _open_out(path):
    if path in (None, "-"):
        return sys.stdout
    return open(path, "w", newline="")


def _close_out(f):
    if f is not sys.stdout:
        f.close()


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sphloss")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    g.add_argument("--loss", default="all")
    g.add_argument("--dims", default="2,10,1000")
    g.add_argument("--trials", type=int, default=100)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--eps", type=float, default=losses.DEFAULT_EPS)
    g.add_argument("--xi", type=float, default=1.0)
    g.add_argument("--output", default="-")
    g.set_defaults(fn=cmd_gradcheck)

    b = sub.add_parser("bound-eval", help="bound validity/tightness report")
    b.add_argument("--samples", type=int, default=1000)
    b.add_argument("--dims", default="2,10,100")
    b.add_argument("--xi-mode", choices=("fixed", "optimized"), default="fixed")
    b.add_argument("--xi", type=float, default=1.0)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--train-probe", action="store_true")
    b.add_argument("--output", default="-")
    b.set_defaults(fn=cmd_bound_eval)

    t = sub.add_parser("train", help="training runs")
    t.add_argument("--config", default=None)
    t.add_argument("--seeds", type=int, default=1)
    t.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key (repeatable)")
    t.add_argument("--out-dir", default="sphloss_out")
    t.set_defaults(fn=cmd_train)

    n = sub.add_parser("bench", help="output-layer per-step latency")
    n.add_argument("--D-list", default="1000,10000,100000")
    n.add_argument("--d", type=int, default=128)
    n.add_argument("--steps", type=int, default=200)
    n.add_argument("--seed", type=int, default=0)
    n.add_argument("--output", default="-")
    n.set_defaults(fn=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except config.ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
