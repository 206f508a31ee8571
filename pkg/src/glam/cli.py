"""Command-line surface: data generation, training, evaluation, pattern
extraction and gradient self-verification.

Exit codes: 0 ok, 1 I/O, 2 usage/config, 3 numerical divergence,
4 verification failure. Every command writing outputs drops a fully
resolved run manifest beside them. GLAM_LOG_LEVEL controls verbosity.
"""

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import __version__
from .assignment import gt_matrix, pad_to_common_size
from .attention import (GlamParameters, NetworkConfig, load_checkpoint,
                        save_checkpoint, validate_parameters)
from .pattern import (collect_patterns, export_heatmap, filter_top_edges,
                      pattern_recovery_score)
from .synthdata import (DatasetParseError, GenConfig, generate_dataset,
                        load_dataset, make_template, save_dataset)
from .training import (DivergenceError, TrainConfig, evaluate,
                       gradient_check, sample_accuracy, train)

logger = logging.getLogger("glam")

EXIT_OK = 0
EXIT_IO = 1
EXIT_USAGE = 2
EXIT_DIVERGED = 3
EXIT_VERIFY = 4


def write_manifest(out_dir, command, seed, **sections):
    doc = {"tool": "glam", "version": __version__, "command": command,
           "seed": seed}
    for key, value in sections.items():
        if value is not None:
            doc[key] = value
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def load_manifest_network(manifest_path):
    with open(manifest_path) as fh:
        doc = json.load(fh)
    if "network" not in doc:
        raise ValueError(f"{manifest_path}: manifest has no 'network' section")
    return NetworkConfig.from_dict(doc["network"])


def _network_config(args):
    if args.paper_scale:
        config = NetworkConfig.paper_scale()
        config.sinkhorn_iters = args.sinkhorn_iters
    else:
        config = NetworkConfig(
            n_layers=args.layers,
            n_self_heads=args.heads,
            n_cross_heads=args.heads,
            feat_dim=args.dim,
            self_dim=args.dim,
            cross_dim=args.dim,
            sinkhorn_iters=args.sinkhorn_iters,
        )
    config.use_sal = not args.no_sal
    config.use_cal = not args.no_cal
    config.validate()
    return config


def cmd_gen_data(args):
    templates = [
        make_template(args.n_keypoints, args.feat_dim, seed=args.seed + ci,
                      name=f"cat{ci}")
        for ci in range(args.categories)
    ]
    config = GenConfig(
        seed=args.seed,
        feature_noise_sigma=args.noise,
        position_noise_sigma=args.pos_noise,
        rotation_range=args.rotation,
        dropout_prob=args.dropout,
        pairs_per_category=args.pairs,
    )
    config.validate()
    dataset = generate_dataset(templates, config)
    os.makedirs(args.out, exist_ok=True)
    data_path = os.path.join(args.out, "dataset.txt")
    save_dataset(dataset, data_path)
    write_manifest(args.out, "gen-data", args.seed,
                   generation=config.to_dict(),
                   inputs={}, outputs={"dataset": data_path},
                   categories=args.categories,
                   n_keypoints=args.n_keypoints, feat_dim=args.feat_dim)
    print(f"wrote {len(dataset.samples)} samples to {data_path}")
    return EXIT_OK


def cmd_train(args):
    net_config = _network_config(args)
    train_config = TrainConfig(
        pos_weight=args.pos_weight,
        learning_rate=args.lr,
        epochs=args.epochs,
        seed=args.seed,
        optimizer=args.optimizer,
    )
    train_config.validate()
    dataset = load_dataset(args.data)
    if dataset.feat_dim != net_config.feat_dim:
        raise ValueError(
            f"dataset feat_dim {dataset.feat_dim} does not match network "
            f"feat_dim {net_config.feat_dim}")
    if args.val_data:
        train_set = dataset.samples
        val_set = load_dataset(args.val_data).samples
    else:
        n_val = int(round(args.val_fraction * len(dataset.samples)))
        if n_val == 0:
            train_set = dataset.samples
            val_set = dataset.samples  # smoke-test mode: validate on train
        else:
            train_set = dataset.samples[:-n_val]
            val_set = dataset.samples[-n_val:]

    params = GlamParameters.init_random(net_config, np.random.default_rng(args.seed))
    report = train(params, net_config, train_set, val_set, train_config)

    os.makedirs(args.out, exist_ok=True)
    ckpt_path = os.path.join(args.out, "checkpoint.json")
    report_path = os.path.join(args.out, "report.csv")
    save_checkpoint(params, ckpt_path)
    report.write_csv(report_path)
    write_manifest(args.out, "train", args.seed,
                   network=net_config.to_dict(),
                   training=train_config.to_dict(),
                   inputs={"data": args.data, "val_data": args.val_data},
                   outputs={"checkpoint": ckpt_path, "report": report_path})
    if report.accuracies:
        print(f"final val accuracy: {report.accuracies[-1]:.4f}")
    print(f"wrote {ckpt_path}")
    return EXIT_OK


def _load_model(args):
    params = load_checkpoint(args.checkpoint)
    manifest = args.manifest
    if manifest is None:
        manifest = os.path.join(os.path.dirname(args.checkpoint) or ".",
                                "manifest.json")
    config = load_manifest_network(manifest)
    validate_parameters(params, config)
    return params, config


def cmd_eval(args):
    params, config = _load_model(args)
    dataset = load_dataset(args.data)
    if not dataset.samples:
        raise ValueError("dataset holds no samples")
    by_category = {}
    for sample in dataset.samples:
        by_category.setdefault(sample.category, []).append(sample)
    rows = []
    for ci in sorted(by_category):
        acc = float(np.mean([sample_accuracy(params, config, s)
                             for s in by_category[ci]]))
        name = dataset.templates[ci].name if ci < len(dataset.templates) else str(ci)
        rows.append((ci, name, acc))
        print(f"category {name}: accuracy {acc:.4f}")
    mean_acc = evaluate(params, config, dataset.samples)
    print(f"mean accuracy: {mean_acc:.4f}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        metrics_path = os.path.join(args.out, "metrics.csv")
        with open(metrics_path, "w") as fh:
            fh.write("category,name,accuracy\n")
            for ci, name, acc in rows:
                fh.write(f"{ci},{name},{acc!r}\n")
            fh.write(f"mean,,{mean_acc!r}\n")
        write_manifest(args.out, "eval", 0,
                       network=config.to_dict(),
                       inputs={"checkpoint": args.checkpoint, "data": args.data},
                       outputs={"metrics": metrics_path})
    return EXIT_OK


def cmd_extract_pattern(args):
    params, config = _load_model(args)
    if not config.use_sal:
        raise ValueError(
            "checkpoint was trained without self-attention; no learnt "
            "adjacency to extract")
    dataset = load_dataset(args.data)
    rng = np.random.default_rng(args.seed)
    os.makedirs(args.out, exist_ok=True)
    score_rows = []
    outputs = {}
    for ci, template in enumerate(dataset.templates):
        samples = [s for s in dataset.samples if s.category == ci]
        if not samples:
            continue
        pattern = collect_patterns(params, config, samples, template.labels,
                                   max_pairs=args.pairs_per_category, rng=rng)
        filtered = filter_top_edges(pattern, args.keep_fraction)
        raw_stem = os.path.join(args.out, f"pattern_{template.name}_raw")
        cut_stem = os.path.join(args.out, f"pattern_{template.name}")
        outputs[f"{template.name}_raw"] = export_heatmap(pattern, raw_stem)[0]
        outputs[template.name] = export_heatmap(filtered, cut_stem)[0]
        score = pattern_recovery_score(pattern, template)
        score_rows.append((ci, template.name, score))
        print(f"category {template.name}: recovery score {score:.4f}")
    scores_path = os.path.join(args.out, "recovery_scores.csv")
    with open(scores_path, "w") as fh:
        fh.write("category,name,recovery_score\n")
        for ci, name, score in score_rows:
            fh.write(f"{ci},{name},{score!r}\n")
    write_manifest(args.out, "extract-pattern", args.seed,
                   network=config.to_dict(),
                   inputs={"checkpoint": args.checkpoint, "data": args.data},
                   outputs={"scores": scores_path, **outputs},
                   keep_fraction=args.keep_fraction,
                   pairs_per_category=args.pairs_per_category)
    return EXIT_OK


def cmd_gradcheck(args):
    from .attention import PointFeatureSet

    rng = np.random.default_rng(args.seed)
    config = NetworkConfig(
        n_layers=args.layers, n_self_heads=args.heads,
        n_cross_heads=args.heads, feat_dim=args.dim, self_dim=args.dim,
        cross_dim=args.dim, sinkhorn_iters=args.sinkhorn_iters)
    config.validate()
    n = args.n
    params = GlamParameters.init_random(config, rng)
    set_a = PointFeatureSet(features=rng.normal(size=(n, args.dim)),
                            positions=rng.random((n, 2)))
    set_b = PointFeatureSet(features=rng.normal(size=(n, args.dim)),
                            positions=rng.random((n, 2)))
    perm = rng.permutation(n)
    gt = gt_matrix([(i, int(perm[i])) for i in range(n)], n)

    worst = gradient_check(params, config, set_a, set_b, gt,
                           pos_weight=args.pos_weight)
    overall = max(worst.values())
    failures = []
    for name in sorted(worst):
        status = "ok" if worst[name] < args.tolerance else "FAIL"
        print(f"{name}: worst rel err {worst[name]:.3e} [{status}]")
        if worst[name] >= args.tolerance:
            failures.append(name)
    print(f"overall worst rel err: {overall:.3e} (tolerance {args.tolerance})")
    if failures:
        print(f"gradient check FAILED for: {', '.join(failures)}")
        return EXIT_VERIFY
    print("gradient check passed")
    return EXIT_OK


def build_parser():
    parser = argparse.ArgumentParser(
        prog="glam",
        description="Joint graph learning and matching on keypoint sets")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--categories", type=int, default=2)
    p.add_argument("--pairs", type=int, default=100,
                   help="sample pairs per category")
    p.add_argument("--n-keypoints", type=int, default=10)
    p.add_argument("--feat-dim", type=int, default=64)
    p.add_argument("--noise", type=float, default=1.0,
                   help="feature noise sigma")
    p.add_argument("--pos-noise", type=float, default=0.01,
                   help="position noise sigma")
    p.add_argument("--rotation", type=float, default=0.3,
                   help="rotation range in radians")
    p.add_argument("--dropout", type=float, default=0.0,
                   help="per-keypoint occlusion probability")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a dataset")
    p.add_argument("--data", required=True, help="training dataset file")
    p.add_argument("--val-data", default=None, help="validation dataset file")
    p.add_argument("--val-fraction", type=float, default=0.1,
                   help="tail fraction held out when --val-data is absent")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--layers", type=int, default=3)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--sinkhorn-iters", type=int, default=5)
    p.add_argument("--pos-weight", type=float, default=5.0)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--optimizer", choices=("plain-gradient", "adaptive-moment"),
                   default="adaptive-moment")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-sal", action="store_true",
                   help="ablation: drop self-attention layers")
    p.add_argument("--no-cal", action="store_true",
                   help="ablation: drop cross-attention layers")
    p.add_argument("--paper-scale", action="store_true",
                   help="full-size preset (3 layers, 8 heads, dim 1024); slow")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--manifest", default=None,
                   help="manifest with the network config (default: "
                        "manifest.json beside the checkpoint)")
    p.add_argument("--out", default=None, help="optional metrics directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("extract-pattern",
                       help="extract learnt graph patterns per category")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--manifest", default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--pairs-per-category", type=int, default=200)
    p.add_argument("--keep-fraction", type=float, default=0.7)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_extract_pattern)

    p = sub.add_parser("gradcheck",
                       help="verify tape gradients against finite differences")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-3)
    p.add_argument("--n", type=int, default=4)
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--layers", type=int, default=1)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--sinkhorn-iters", type=int, default=2)
    p.add_argument("--pos-weight", type=float, default=5.0)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None):
    logging.basicConfig(
        level=os.environ.get("GLAM_LOG_LEVEL", "WARNING").upper(),
        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    try:
        return args.func(args)
    except DivergenceError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except DatasetParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


def run():
    raise SystemExit(main())


if __name__ == "__main__":
    run()
