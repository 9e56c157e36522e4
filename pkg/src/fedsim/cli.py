"""``fedsim`` command line.

Exit codes: 0 success, 1 configuration or usage error, 2 data error,
3 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from . import dataset as D
from .config import default_workers, load_config
from .errors import ConfigError, FedSimError
from .metrics import WEIGHTINGS, stratified_accuracy, summarize_accuracy, systems_budget, write_summary_csv
from .presets import PRESETS, get_preset
from .runner import export_csv, read_record, run_experiment
from .synthgen import SynthConfig, generate_synthetic

logger = logging.getLogger("fedsim")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def cmd_generate_synth(args) -> int:
    cfg = SynthConfig(
        num_tasks=args.num_tasks, cluster_probs=tuple(args.cluster_probs),
        latent_dim=args.latent_dim, feature_dim=args.feature_dim, num_classes=args.num_classes,
        logit_noise_std=args.logit_noise_std, lognormal_mu=args.lognormal_mu,
        lognormal_sigma=args.lognormal_sigma, sample_offset=args.sample_offset,
        sample_cap=args.sample_cap, seed=args.seed,
    )
    cfg.validate()
    ds = generate_synthetic(cfg, workers=args.workers)
    D.save_dataset(ds, args.out)
    logger.info("wrote %d devices, %d samples to %s", len(ds), ds.total_samples, args.out)
    return 0


def cmd_stats(args) -> int:
    stats = D.dataset_stats(D.load_dataset(args.input))
    print(json.dumps(stats.as_dict()))
    return 0


def cmd_filter(args) -> int:
    ds = D.filter_min_samples(D.load_dataset(args.input), args.min_samples)
    D.save_dataset(ds, args.out)
    logger.info("kept %d devices with >= %d samples", len(ds), args.min_samples)
    return 0


def cmd_split(args) -> int:
    if len(args.fractions) != 3:
        raise ConfigError("--fractions needs exactly three values")
    parts = D.split_train_val_test(D.load_dataset(args.input), tuple(args.fractions), args.seed)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, part in zip(("train", "val", "test"), parts):
        D.save_dataset(part, out / f"{name}.json")
    return 0


def cmd_subsample(args) -> int:
    ds = D.subsample_devices(D.load_dataset(args.input), count=args.count,
                             fraction=args.fraction, seed=args.seed)
    D.save_dataset(ds, args.out)
    return 0


def cmd_mix_iid(args) -> int:
    D.save_dataset(D.mix_iid(D.load_dataset(args.input), args.seed), args.out)
    return 0


def cmd_run(args) -> int:
    if (args.config is None) == (args.preset is None):
        raise ConfigError("give exactly one of --config or --preset")
    cfg = get_preset(args.preset) if args.preset else load_config(args.config)
    if args.seed is not None:
        cfg["seed"] = args.seed
        if "synth" in cfg["data"]:
            cfg["data"]["synth"]["seed"] = args.seed
    workers = args.workers if args.workers is not None else default_workers()
    records = run_experiment(cfg, args.out, workers=workers)
    summary = next((r for r in records if r["type"] == "summary"), None)
    if summary:
        logger.info("%s: mean %s accuracy %.4f over %d devices", cfg["name"],
                    summary["weighting"], summary["mean"], summary["n_devices"])
    return 0


def cmd_metrics(args) -> int:
    report, csv_rows = [], []
    multi = len(args.records) > 1
    for path in args.records:
        records = read_record(path)
        name = records[0]["config"].get("name", Path(path).stem)
        prefix = f"{Path(path).stem}:" if multi else ""
        report.append({"type": "metrics", "source": str(path), "name": name})
        final = [r for r in records if r["type"] == "final"]
        entries = [(d["device_id"], d["accuracy"], d["n_test"]) for d in final[0]["devices"]] if final else []
        hierarchy = {d["device_id"]: d["group"] for d in final[0]["devices"] if "group" in d} if final else {}
        if entries:
            for weighting in WEIGHTINGS:
                s = summarize_accuracy(entries, weighting)
                report.append({"type": "accuracy", "group": "all", **s.as_dict()})
                csv_rows.append((prefix + "all", s))
                if hierarchy:
                    for group, gs in stratified_accuracy(entries, hierarchy, weighting).items():
                        report.append({"type": "accuracy", "group": group, **gs.as_dict()})
                        csv_rows.append((prefix + group, gs))
        if args.threshold is not None:
            rounds = [r for r in records if r["type"] == "round"]
            if any(r.get("eval") for r in rounds):
                budget = systems_budget(rounds, args.threshold, args.weighting)
                report.append({"type": "budget", "weighting": args.weighting, **budget.as_dict()})
            else:
                logger.warning("%s has no evaluated rounds; skipping the budget", path)
    text = "".join(json.dumps(r, separators=(",", ":")) + "\n" for r in report)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    if args.csv:
        write_summary_csv(args.csv, csv_rows)
    return 0


def cmd_export(args) -> int:
    n = export_csv(args.record, args.kind, args.out)
    logger.info("wrote %d rows to %s", n, args.out)
    return 0


def cmd_presets(args) -> int:
    if args.name:
        sys.stdout.write(yaml.safe_dump(get_preset(args.name), sort_keys=False))
    else:
        for name in sorted(PRESETS):
            print(f"{name}: {PRESETS[name]['description']}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="fedsim", description="Federated learning simulation toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate-synth", help="generate the synthetic federated dataset")
    g.add_argument("--num-tasks", type=int, required=True)
    g.add_argument("--cluster-probs", type=_floats, default=[1.0])
    g.add_argument("--latent-dim", type=int, default=5)
    g.add_argument("--feature-dim", type=int, default=60)
    g.add_argument("--num-classes", type=int, default=5)
    g.add_argument("--logit-noise-std", type=float, default=SynthConfig.logit_noise_std)
    g.add_argument("--lognormal-mu", type=float, default=3.0)
    g.add_argument("--lognormal-sigma", type=float, default=2.0)
    g.add_argument("--sample-offset", type=int, default=5)
    g.add_argument("--sample-cap", type=int, default=1000)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--workers", type=int, default=1)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate_synth)

    s = sub.add_parser("stats", help="device/sample statistics of a dataset")
    s.add_argument("input")
    s.set_defaults(func=cmd_stats)

    f = sub.add_parser("filter", help="keep devices with at least k samples")
    f.add_argument("input")
    f.add_argument("--min-samples", type=int, required=True)
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_filter)

    sp = sub.add_parser("split", help="per-device train/val/test split")
    sp.add_argument("input")
    sp.add_argument("--fractions", type=_floats, default=[0.6, 0.2, 0.2])
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out-dir", required=True)
    sp.set_defaults(func=cmd_split)

    ss = sub.add_parser("subsample", help="keep a random subset of devices")
    ss.add_argument("input")
    grp = ss.add_mutually_exclusive_group(required=True)
    grp.add_argument("--count", type=int)
    grp.add_argument("--fraction", type=float)
    ss.add_argument("--seed", type=int, default=0)
    ss.add_argument("--out", required=True)
    ss.set_defaults(func=cmd_subsample)

    m = sub.add_parser("mix-iid", help="pool all samples into one shuffled device")
    m.add_argument("input")
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_mix_iid)

    r = sub.add_parser("run", help="run an experiment")
    r.add_argument("--config")
    r.add_argument("--preset", choices=sorted(PRESETS))
    r.add_argument("--seed", type=int)
    r.add_argument("--workers", type=int, help="default: $FEDSIM_WORKERS or 1")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_run)

    mt = sub.add_parser("metrics", help="summarize experiment records")
    mt.add_argument("records", nargs="+")
    mt.add_argument("--threshold", type=float, help="report the systems budget to reach this accuracy")
    mt.add_argument("--weighting", choices=WEIGHTINGS, default="per_sample")
    mt.add_argument("--out")
    mt.add_argument("--csv")
    mt.set_defaults(func=cmd_metrics)

    e = sub.add_parser("export", help="CSV view of an experiment record")
    e.add_argument("--record", required=True)
    e.add_argument("--kind", choices=("rounds", "devices", "summary"), required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_export)

    pr = sub.add_parser("presets", help="list presets or print one as YAML")
    pr.add_argument("name", nargs="?")
    pr.set_defaults(func=cmd_presets)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except FedSimError as exc:
        logger.error("%s", exc)
        return exc.exit_code
    except ValueError as exc:
        # bad argument values (e.g. subsampling more devices than exist)
        logger.error("%s", exc)
        return 1
    except OSError as exc:
        logger.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
