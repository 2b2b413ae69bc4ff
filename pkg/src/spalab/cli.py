"""Command-line entry point: ``spalab <subcommand> [--config FILE] [flags]``.

Every flag can also be given in a ``key = value`` config file; flags on the
command line win.  List-valued options are comma separated in both places.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import advtrain, campaign, data, ensemble, models, structured, viz
from .config import ConfigError, load_config, normalize_key

log = logging.getLogger("spalab")


def int_list(text: str) -> list[int]:
    return [int(t) for t in str(text).split(",") if t.strip()]


def str_list(text: str) -> list[str]:
    return [t.strip() for t in str(text).split(",") if t.strip()]


def flag(text: str) -> bool:
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


# ---------------------------------------------------------------------------
# shared option groups
# ---------------------------------------------------------------------------


def add_data_args(p):
    g = p.add_argument_group("data")
    g.add_argument("--data", default="synthetic", help="'synthetic' or a CIFAR-10 binary file/directory")
    g.add_argument("--split", default="test", choices=("train", "test"))
    g.add_argument("--n", type=int, default=1000, help="synthetic sample count")
    g.add_argument("--hw", type=int, default=16, help="synthetic image side")
    g.add_argument("--classes", type=int, default=4)
    g.add_argument("--amplitude", type=float, default=data.SyntheticSpec.amplitude)
    g.add_argument("--noise", type=float, default=data.SyntheticSpec.noise)
    g.add_argument("--data-seed", type=int, default=0)
    g.add_argument("--limit", type=int, default=0, help="use only the first N instances (0 = all)")


def add_group_args(p):
    g = p.add_argument_group("structured budget")
    g.add_argument("--pattern", default="none",
                   help="none | patch:R | rows | columns | path to a pattern file")
    g.add_argument("--stride", type=int, default=1)


def add_attack_args(p, eps_default="10"):
    g = p.add_argument_group("attack")
    g.add_argument("--eps", type=int_list, default=eps_default, help="pixel or group budget(s)")
    g.add_argument("--eps-inf", type=float, default=1.0)
    g.add_argument("--seeds", type=int_list, default="0")
    g.add_argument("--workers", type=int, default=1)


def load_dataset(args, split=None) -> data.Dataset:
    split = split or args.split
    if args.data == "synthetic":
        spec = data.SyntheticSpec(n=args.n, h=args.hw, w=args.hw, classes=args.classes,
                                  amplitude=args.amplitude, noise=args.noise)
        ds = data.make_synthetic(spec, seed=args.data_seed, split=split)
    else:
        ds = data.load_cifar10(args.data)
    if getattr(args, "limit", 0):
        ds = ds.subset(np.arange(min(args.limit, len(ds.labels))))
    return ds


def group_spec(args, hw) -> structured.GroupSpec | None:
    pat = args.pattern
    h, w = hw
    if pat == "none":
        return None
    if pat == "rows":
        return structured.GroupSpec.rows(h, w)
    if pat == "columns":
        return structured.GroupSpec.columns(h, w)
    if pat.startswith("patch:"):
        return structured.GroupSpec.patch(int(pat.split(":", 1)[1]), h, w, args.stride)
    return structured.GroupSpec.from_pattern_file(pat, h, w, args.stride)


def named_models(spec_list) -> dict:
    out = {}
    for item in spec_list:
        name, _, path = item.rpartition("=")
        name = name or Path(path).stem
        if name in out:
            raise SystemExit(f"duplicate model name {name!r}")
        out[name] = models.load_checkpoint(path)
    return out


def train_config(args) -> models.TrainConfig:
    return models.TrainConfig(epochs=args.epochs, batch_size=args.batch_size, lr=args.lr, seed=args.seed,
                              momentum=args.momentum, weight_decay=args.weight_decay, hflip=args.hflip)


def add_train_args(p, epochs, lr):
    g = p.add_argument_group("training")
    g.add_argument("--out", required=True, help="checkpoint path")
    g.add_argument("--arch", default="cnn", choices=("cnn", "mlp"))
    g.add_argument("--init", default="", help="start from this checkpoint instead of a fresh model")
    g.add_argument("--epochs", type=int, default=epochs)
    g.add_argument("--batch-size", type=int, default=32)
    g.add_argument("--lr", type=float, default=lr)
    g.add_argument("--momentum", type=float, default=0.9)
    g.add_argument("--weight-decay", type=float, default=5e-4)
    g.add_argument("--hflip", type=flag, default="false")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--metrics", default="", help="optional per-epoch CSV")


def fresh_model(args, ds):
    if args.init:
        return models.load_checkpoint(args.init)
    shape = ds.images.shape[1:]
    if args.arch == "cnn":
        return models.make_cnn(shape, ds.num_classes, seed=args.seed)
    return models.make_mlp(shape, ds.num_classes, seed=args.seed)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_train(args):
    tr = load_dataset(args, "train")
    te = load_dataset(args, "test")
    model, hist = models.sgd_train(fresh_model(args, tr), tr, train_config(args))
    models.save_checkpoint(model, args.out)
    if args.metrics:
        advtrain.write_metrics_csv(hist, args.metrics)
    print(f"train_acc={hist.clean_acc[-1]:.4f} test_acc={models.accuracy(model, te.images, te.labels):.4f}")


def cmd_advtrain(args):
    tr = load_dataset(args, "train")
    te = load_dataset(args, "test")
    cfg = advtrain.AdvTrainConfig(
        train=train_config(args), eps=args.eps[0], eps_multiplier=args.multiplier, attack_iters=args.attack_iters,
        tolerance=args.tolerance, backward_policy=args.policy, method=args.method, trades_beta=args.trades_beta,
        eps_inf=args.eps_inf, spec=group_spec(args, tr.images.shape[1:3]),
    )
    fn = advtrain.sat_train if args.method == "sAT" else advtrain.strades_train
    probe = (te.images[: args.probe], te.labels[: args.probe]) if args.probe else None
    model, hist = fn(fresh_model(args, tr), tr, cfg, probe=probe)
    models.save_checkpoint(model, args.out)
    if args.metrics:
        advtrain.write_metrics_csv(hist, args.metrics)
    print(f"train_eps={cfg.train_eps} test_acc={models.accuracy(model, te.images, te.labels):.4f}")


def _iters_map(args):
    out = {"spgd_unproj": args.iters, "spgd_proj": args.iters, "rs": args.iters}
    out["saa"] = tuple(ensemble.FULL_ITERS if args.full_iters else args.stage_iters)
    return out


def _emit(result: campaign.CampaignResult, args):
    if args.out:
        result.write_csv(args.out, include_time=args.with_time)
    for cell, agg in result.aggregates().items():
        print(f"{cell}: clean_acc={agg['clean_acc']:.4f} robust_acc={agg['robust_acc']:.4f}")


def cmd_attack(args):
    ds = load_dataset(args)
    result = campaign.run_campaign(
        named_models(args.models), ds, args.attacks, args.eps, args.seeds, _iters_map(args),
        spec=group_spec(args, ds.images.shape[1:3]), eps_inf=args.eps_inf,
        iteration_sweep=args.sweep or None, workers=args.workers,
    )
    _emit(result, args)


def cmd_ensemble(args):
    args.attacks = ["saa"]
    args.sweep = []
    cmd_attack(args)


def cmd_transfer(args):
    ds = load_dataset(args)
    src = models.load_checkpoint(args.source)
    tgt = models.load_checkpoint(args.target)
    res = campaign.transfer_eval(src, tgt, ds, args.attack, args.eps[0], args.iters, args.seeds[0],
                                 group_spec(args, ds.images.shape[1:3]), args.eps_inf)
    print(json.dumps(res, sort_keys=True))


def cmd_ratio_sim(args):
    spec = group_spec(args, (args.image_hw, args.image_hw))
    if spec is None:
        raise SystemExit("ratio-sim needs --pattern")
    rows = structured.ratio_simulation(spec, args.eps, args.samples, args.seed, args.cap)
    print("eps,mean,std,samples,skipped")
    for r in rows:
        print(f"{r['eps']},{r['mean']:.6f},{r['std']:.6f},{r['samples']},{r['skipped']}")


def cmd_export_images(args):
    ds = load_dataset(args)
    model = models.load_checkpoint(args.model)
    spec = group_spec(args, ds.images.shape[1:3])
    x, y = ds.images[: args.count], ds.labels[: args.count]
    iters = args.iters if args.attack != "saa" else tuple(args.stage_iters)
    out = campaign._run_attack(args.attack, model, x, y, args.eps[0], iters, args.seeds[0], spec, args.eps_inf,
                               np.arange(len(x)))
    Path(args.out_dir).mkdir(parents=True, exist_ok=True)
    for i in range(len(x)):
        path = Path(args.out_dir) / f"{i:04d}_{'adv' if out.success[i] else 'robust'}.ppm"
        viz.export_perturbation_image(x[i], out.delta[i], path, scale=args.scale)
    print(f"wrote {len(x)} images to {args.out_dir}")


def cmd_report(args):
    for path in args.csv:
        res = campaign.CampaignResult.read_csv(path)
        print(f"== {path}")
        for cell, agg in res.aggregates().items():
            print(f"{cell}: n={agg['n']} clean_acc={agg['clean_acc']:.4f} robust_acc={agg['robust_acc']:.4f} "
                  f"robust_acc_overall={agg['robust_acc_overall']:.4f}")
            if args.histogram:
                print("  iterations-to-success: " + json.dumps(agg["success_iterations"]))


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spalab", description="Sparse adversarial attacks, evaluation and adversarial training.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def command(name, fn, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", help="key = value file with defaults for any flag")
        p.set_defaults(func=fn)
        return p

    p = command("train", cmd_train, "train an undefended model")
    add_data_args(p)
    add_train_args(p, epochs=15, lr=0.02)

    p = command("advtrain", cmd_advtrain, "adversarial training (sAT / sTRADES)")
    add_data_args(p)
    add_train_args(p, epochs=30, lr=0.02)
    add_group_args(p)
    p.add_argument("--eps", type=int_list, default="10", help="evaluation budget; training uses eps * multiplier")
    p.add_argument("--eps-inf", type=float, default=1.0)
    p.add_argument("--multiplier", type=float, default=6.0)
    p.add_argument("--attack-iters", type=int, default=20)
    p.add_argument("--tolerance", type=int, default=10)
    p.add_argument("--policy", default="random", choices=advtrain.POLICIES)
    p.add_argument("--method", default="sAT", choices=advtrain.METHODS)
    p.add_argument("--trades-beta", type=float, default=6.0)
    p.add_argument("--probe", type=int, default=0, help="test instances attacked after each epoch (0 = off)")

    for name, fn, help in (("attack", cmd_attack, "run an attack campaign and write the CSV"),
                           ("ensemble", cmd_ensemble, "run the sAA cascade")):
        p = command(name, fn, help)
        add_data_args(p)
        add_attack_args(p)
        add_group_args(p)
        p.add_argument("--models", type=str_list, required=True, help="name=checkpoint entries, comma separated")
        if name == "attack":
            p.add_argument("--attacks", type=str_list, default="spgd_unproj")
            p.add_argument("--sweep", type=int_list, default="", help="iteration budgets for an iteration sweep")
        p.add_argument("--iters", type=int, default=300, help="iterations (sPGD) or queries (RS)")
        p.add_argument("--stage-iters", type=int_list, default=",".join(map(str, ensemble.DESK_ITERS)))
        p.add_argument("--full-iters", type=flag, default="false", help="use 10000 iterations per cascade stage")
        p.add_argument("--out", default="", help="CSV output path")
        p.add_argument("--with-time", type=flag, default="false", help="record wall time (breaks byte-identity)")

    p = command("transfer", cmd_transfer, "craft on a source model, evaluate on a target")
    add_data_args(p)
    add_attack_args(p)
    add_group_args(p)
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--attack", default="spgd_unproj", choices=campaign.ATTACKS)
    p.add_argument("--iters", type=int, default=300)

    p = command("ratio-sim", cmd_ratio_sim, "exact vs approximate group-norm ratio simulation")
    add_group_args(p)
    p.set_defaults(pattern="patch:3")
    p.add_argument("--image-hw", type=int, default=32)
    p.add_argument("--eps", type=int_list, default="1,2,3,4,5")
    p.add_argument("--samples", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cap", type=int, default=8)

    p = command("export-images", cmd_export_images, "write PPM panels of adversarial examples")
    add_data_args(p)
    add_attack_args(p)
    add_group_args(p)
    p.add_argument("--model", required=True)
    p.add_argument("--attack", default="spgd_unproj", choices=campaign.ATTACKS)
    p.add_argument("--iters", type=int, default=300)
    p.add_argument("--stage-iters", type=int_list, default=",".join(map(str, ensemble.DESK_ITERS)))
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--scale", type=int, default=4)
    p.add_argument("--out-dir", default="images")

    p = command("report", cmd_report, "summarize campaign CSV files")
    p.add_argument("--csv", type=str_list, required=True)
    p.add_argument("--histogram", type=flag, default="false")
    return parser


def _find_config(argv):
    for i, a in enumerate(argv):
        if a == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if a.startswith("--config="):
            return a.split("=", 1)[1]
    return None


def _apply_config(parser, argv):
    """Parse ``argv`` with config-file values installed as subcommand defaults."""
    argv = list(sys.argv[1:] if argv is None else argv)
    path = _find_config(argv)
    command = next((a for a in argv if not a.startswith("-")), None)
    subs = parser._subparsers._group_actions[0].choices
    if path is None or command not in subs:
        return parser.parse_args(argv)
    sub = subs[command]
    known = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, value in load_config(path).items():
        dest = normalize_key(key)
        if dest not in known or dest in ("help", "config"):
            raise ConfigError(f"{path}: unknown key {key!r} for '{command}'")
        # required flags satisfied by the file become optional
        known[dest].required = False
        defaults[dest] = value
    sub.set_defaults(**defaults)
    # argparse runs string defaults through ``type`` but skips ``choices``
    for dest, value in defaults.items():
        choices = known[dest].choices
        if choices is not None and value not in choices:
            raise ConfigError(f"{path}: {dest} must be one of {list(choices)}, got {value!r}")
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
    except ConfigError as exc:
        parser.error(str(exc))
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    args.func(args)
    return 0


if __name__ == "__main__":
    sys.exit(main())
