"""Command-line front end.

Subcommands: gen-data, train, attack, explain, verify-mi. Exit codes are
stable for scripting: 0 success, 1 usage or configuration error, 2 runtime
failure. Every command is deterministic given its seed, and every report
embeds the fully resolved configuration.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys

import numpy as np

from .attacks import ATTACK_KINDS, AttackSpec, run_attack
from .config import ConfigError, load_config, parse_fraction
from .data import Dataset, DatasetMeta, load_dataset, save_dataset, synth_shapes
from .gradcam import heatmap_objects, write_csv, write_pgm
from .mi_oracle import (ConditionalTable, loss_identity_residual,
                        mutual_information_exact, mutual_information_ratio_form,
                        optimality_search)
from .model import build_moe, build_single, load_model, save_model
from .training import EvalReport, cscore, evaluate, iscore, train_model


class UsageError(ConfigError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="immunity", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic shape dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("train", help="train a model from a config file")
    p.add_argument("--config", default=None)
    p.add_argument("--data", required=True)
    p.add_argument("--out-model", required=True)
    p.add_argument("--log", default=None)
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key")

    p = sub.add_parser("attack", help="evaluate a model under an evasion attack")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--attack", default="none",
                   help=f"one of {{{','.join(ATTACK_KINDS)}}} or none")
    p.add_argument("--eps", default="8/255", help="budget; fractions like 8/255 accepted")
    p.add_argument("--steps", type=int, default=20)
    p.add_argument("--step-size", default="2/255")
    p.add_argument("--seeds", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rsg", default="fresh_permutation",
                   choices=["identity", "fresh_permutation"])
    p.add_argument("--out-report", required=True)
    p.add_argument("--out-adv", default=None,
                   help="also export the adversarial batch as a dataset container")

    p = sub.add_parser("explain", help="export per-expert heatmaps for samples")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--indices", required=True, help="comma-separated sample indices")
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("verify-mi", help="run the information-theoretic property sweeps")
    p.add_argument("--resolution", default="0.01")
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    return parser


def cmd_gen_data(args) -> int:
    if os.path.exists(args.out) and not args.force:
        raise UsageError(f"{args.out} exists; pass --force to overwrite")
    try:
        dataset = synth_shapes(args.n, args.classes, args.size, args.seed)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    save_dataset(dataset, args.out)
    print(json.dumps({"written": args.out, "n": len(dataset),
                      "classes": dataset.meta.n_classes, "size": args.size,
                      "seed": args.seed}))
    return 0


def cmd_train(args) -> int:
    config = load_config(args.config, args.set)
    train_cfg = config.train_config()
    dataset = load_dataset(args.data)
    echo = {"config": config.echo(), "data": args.data, "out_model": args.out_model}
    print(json.dumps(echo))

    meta = dataset.meta
    if config["n_experts"] == 1:
        model = build_single(dataset.input_shape, meta.n_classes, seed=train_cfg.seed,
                             channels=config["conv_channels"],
                             norm_mean=meta.channel_means, norm_std=meta.channel_stds)
    else:
        model = build_moe(dataset.input_shape, meta.n_classes,
                          n_experts=config["n_experts"], seed=train_cfg.seed,
                          channels=config["conv_channels"],
                          norm_mean=meta.channel_means, norm_std=meta.channel_stds)

    log_fh = open(args.log, "w", encoding="utf-8") if args.log else None
    try:
        log_fn = None
        if log_fh is not None:
            def log_fn(entry):
                log_fh.write(json.dumps(entry) + "\n")
        train_model(model, dataset, train_cfg, log_fn=log_fn)
    finally:
        if log_fh is not None:
            log_fh.close()
    save_model(model, args.out_model)
    print(json.dumps({"model_written": args.out_model,
                      "param_checksum": model.param_checksum()}))
    return 0


def _attack_spec(args) -> AttackSpec | None:
    name = args.attack.lower()
    if name == "none":
        return None
    if name not in ATTACK_KINDS:
        raise UsageError(f"unknown attack {args.attack!r}; "
                         f"expected one of {{{','.join(ATTACK_KINDS)}}} or none")
    return AttackSpec(kind=name, epsilon=parse_fraction(args.eps),
                      step_size=parse_fraction(args.step_size),
                      iterations=args.steps if name != "fgsm" else 1,
                      random_start=(name == "pgd"))


def cmd_attack(args) -> int:
    if args.seeds < 1:
        raise UsageError(f"--seeds must be >= 1, got {args.seeds}")
    model = load_model(args.model)
    dataset = load_dataset(args.data)
    spec = _attack_spec(args)

    config_echo = {"model": args.model, "data": args.data,
                   "attack": spec.describe() if spec else None,
                   "rsg_eval_mode": args.rsg}
    per_seed = []
    adv_images = None
    for k in range(args.seeds):
        seed = args.seed + k
        rng = np.random.default_rng(np.random.SeedSequence(seed))
        entry = EvalReport(
            clean_accuracy=evaluate(model, dataset, rsg_eval_mode=args.rsg, rng=rng),
            config=config_echo, seed=seed)
        if spec is not None:
            entry.attack_accuracies[spec.kind] = evaluate(model, dataset, attack=spec,
                                                          rsg_eval_mode=args.rsg, rng=rng)
        entry.iscore = iscore(model, dataset, rng)
        entry.cscore = cscore(model, dataset, rng)
        per_seed.append(entry)
        if spec is not None and args.out_adv and k == 0:
            adv_rng = np.random.default_rng(np.random.SeedSequence(seed).spawn(1)[0])
            adv_images = np.concatenate(
                [run_attack(model, x, y, spec, adv_rng).x_adv
                 for x, y in dataset.batches(128)])

    labels, counts = np.unique(dataset.labels, return_counts=True)

    def agg(values):
        if not values:
            return None
        return {"mean": float(np.mean(values)), "std": float(np.std(values)),
                "per_seed": values}

    report = {
        **config_echo,
        "seeds": [e.seed for e in per_seed],
        "clean_accuracy": agg([e.clean_accuracy for e in per_seed]),
        "attack_accuracy": agg([e.attack_accuracies[spec.kind] for e in per_seed]
                               if spec is not None else []),
        "iscore": agg([e.iscore for e in per_seed]),
        "cscore": agg([e.cscore for e in per_seed]),
        "iscore_sample_size": min(256, len(dataset)),
        "per_class_counts": {int(l): int(c) for l, c in zip(labels, counts)},
        "n_samples": len(dataset),
        "per_seed_reports": [e.to_dict() for e in per_seed],
    }
    with open(args.out_report, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=2)
        fh.write("\n")
    if adv_images is not None:
        adv = Dataset(np.clip(adv_images, 0.0, 1.0), dataset.labels,
                      DatasetMeta(dataset.meta.n_classes, dataset.meta.channel_means,
                                  dataset.meta.channel_stds, len(dataset),
                                  dataset.meta.provenance))
        save_dataset(adv, args.out_adv)
    print(json.dumps({"report_written": args.out_report}))
    return 0


def cmd_explain(args) -> int:
    model = load_model(args.model)
    dataset = load_dataset(args.data)
    try:
        indices = [int(p) for p in args.indices.split(",") if p.strip()]
    except ValueError:
        raise UsageError(f"--indices must be comma-separated integers, got {args.indices!r}") \
            from None
    bad = [i for i in indices if not 0 <= i < len(dataset)]
    if bad:
        raise UsageError(f"sample index {bad[0]} out of range; valid range is "
                         f"0..{len(dataset) - 1}")
    os.makedirs(args.out_dir, exist_ok=True)
    x = dataset.images[indices]
    y = dataset.labels[indices]
    per_sample = heatmap_objects(model, x, y)
    written = []
    for pos, q in enumerate(indices):
        gray = x[pos].mean(axis=0)
        path = os.path.join(args.out_dir, f"sample{q}_input.pgm")
        write_pgm(gray, path)
        written.append(path)
        for hm in per_sample[pos]:
            stem = os.path.join(args.out_dir, f"sample{q}_expert{hm.expert_index}")
            write_pgm(hm.grid, stem + ".pgm")
            write_csv(hm.grid, stem + ".csv")
            written += [stem + ".pgm", stem + ".csv"]
    print(json.dumps({"out_dir": args.out_dir, "files": len(written)}))
    return 0


def cmd_verify_mi(args) -> int:
    if args.trials < 1:
        raise UsageError(f"--trials must be >= 1, got {args.trials}")
    resolution = parse_fraction(args.resolution)
    rng = np.random.default_rng(args.seed)
    results = []

    # 1: direct definition vs per-expert ratio decomposition
    worst = 0.0
    for _ in range(args.trials):
        n = int(rng.choice([2, 3, 5]))
        g = int(rng.integers(2, 17))
        table = ConditionalTable(rng.dirichlet(np.ones(g), size=n))
        worst = max(worst, abs(mutual_information_exact(table)
                               - mutual_information_ratio_form(table)))
    results.append(("definition-vs-decomposition agreement", worst <= 1e-12,
                    f"max |delta| = {worst:.3e}"))

    # 2: diversity-loss identity against the exact MI
    worst = 0.0
    for _ in range(args.trials):
        n = int(rng.choice([2, 3, 5]))
        g = int(rng.integers(2, 65))
        worst = max(worst, loss_identity_residual(rng.dirichlet(np.ones(g), size=n)))
    results.append(("loss-to-MI identity", worst <= 1e-9, f"max residual = {worst:.3e}"))

    # 3: MI range [0, ln N] with both extremes attained
    ok = True
    detail = []
    for n in (2, 3, 5):
        ident = mutual_information_exact(ConditionalTable(np.tile(
            rng.dirichlet(np.ones(8)), (n, 1))))
        disjoint = mutual_information_exact(ConditionalTable(np.eye(n)))
        ok = ok and abs(ident) <= 1e-12 and abs(disjoint - math.log(n)) <= 1e-12
        detail.append(f"N={n}: identical {ident:.2e}, disjoint-lnN {disjoint - math.log(n):.2e}")
    results.append(("MI bounds and extremes", ok, "; ".join(detail)))

    # 4: point-mass optimality of the constrained maximizer
    ok = True
    detail = ""
    for trial in range(max(1, args.trials // 5)):
        n = int(rng.choice([2, 3]))
        g = int(rng.integers(2, 5))
        fixed = rng.dirichlet(np.ones(g), size=n - 1)
        try:
            optimality_search(fixed, resolution)
        except AssertionError as exc:
            ok = False
            detail = str(exc)
            break
    results.append(("point-mass optimality", ok, detail or "all maximizers at a vertex"))

    failed = 0
    for name, passed, detail in results:
        print(f"{'PASS' if passed else 'FAIL'}  {name}  {detail}")
        failed += 0 if passed else 1
    return 2 if failed else 0


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        handler = {"gen-data": cmd_gen_data, "train": cmd_train, "attack": cmd_attack,
                   "explain": cmd_explain, "verify-mi": cmd_verify_mi}[args.command]
        return handler(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - map any runtime failure to exit 2
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
