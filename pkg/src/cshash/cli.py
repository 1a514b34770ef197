"""Command-line surface.

Every artifact is written atomically and gets a manifest sidecar
(<artifact>.manifest.json) recording the subcommand, resolved flags, seeds and
SHA-256 digests of the inputs, so outputs are regenerable bit-for-bit from the
command line alone. Exit codes: 0 success, 2 validation error, 3 runtime
failure. Primary results go to stdout, diagnostics to stderr.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from dataclasses import replace

import numpy as np

import cshash
from cshash import aie, binhash, centers, fileio, retrieval, trainer
from cshash.errors import ValidationError
from cshash.losses import LossConfig

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_RUNTIME = 3


def default_threads() -> int:
    env = os.environ.get("CSCE_THREADS", "")
    try:
        return max(1, int(env)) if env else 1
    except ValueError:
        return 1


def emit_manifest(
    artifact: str, subcommand: str, args: argparse.Namespace, inputs: list[str]
) -> None:
    flags = {
        key: value
        for key, value in sorted(vars(args).items())
        if key != "func" and not key.startswith("_")
    }
    manifest = {
        "tool": "cshash",
        "version": cshash.__version__,
        "subcommand": subcommand,
        "flags": flags,
        "seeds": {key: value for key, value in flags.items() if "seed" in key},
        "inputs": {path: fileio.sha256_file(path) for path in sorted(set(inputs))},
    }
    payload = json.dumps(manifest, indent=2, sort_keys=True, default=str) + "\n"
    fileio.atomic_write(artifact + ".manifest.json", payload.encode())


def write_csv(path: str, header: list[str], rows: list[list]) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    fileio.atomic_write(path, buf.getvalue().encode())


def read_label_file(path: str) -> tuple[np.ndarray, list]:
    """CSV with one `id,labels` row per item; labels are `;`-joined ints.

    Returns (ids, labels) where labels holds ints for single-label rows and
    frozensets when any row carries several labels.
    """
    ids: list[int] = []
    raw: list[list[int]] = []
    with open(path, newline="") as fh:
        for line_no, row in enumerate(csv.reader(fh), start=1):
            if not row or (line_no == 1 and row[0].strip().lower() == "id"):
                continue
            if len(row) != 2:
                raise ValidationError(f"{path}:{line_no}: expected 'id,labels'")
            try:
                ids.append(int(row[0]))
                parts = [int(p) for p in row[1].split(";") if p.strip() != ""]
            except ValueError as exc:
                raise ValidationError(f"{path}:{line_no}: {exc}") from exc
            if not parts:
                raise ValidationError(f"{path}:{line_no}: empty label list")
            raw.append(parts)
    if any(len(parts) > 1 for parts in raw):
        return np.asarray(ids, dtype=np.uint64), [frozenset(p) for p in raw]
    return np.asarray(ids, dtype=np.uint64), [p[0] for p in raw]


def parse_int_tuple(text: str, n: int, what: str) -> tuple[int, ...]:
    parts = tuple(int(p) for p in text.split(","))
    if len(parts) != n:
        raise ValidationError(f"{what} needs {n} comma-separated integers, got {text!r}")
    return parts


# --- subcommands -----------------------------------------------------------


def cmd_centers(args: argparse.Namespace) -> int:
    if not centers.is_power_of_two(args.bits) or args.bits < 2:
        raise ValidationError("bits must be a power of two")
    problem = centers.ProblemConfig(
        n_samples=1, n_classes=args.classes, input_dim=1, code_bits=args.bits
    )
    generated = centers.generate_centers(problem, seed=args.seed)
    centers.write_centers(args.out, generated)
    emit_manifest(args.out, "centers", args, [])
    print(f"wrote {generated.classes}x{generated.bits} centers to {args.out}", file=sys.stderr)
    return EXIT_OK


def cmd_encode(args: argparse.Namespace) -> int:
    features = fileio.read_tensor(args.features)
    if features.ndim != 2:
        raise ValidationError(f"features must be 2-D (N x D), got {features.shape}")
    params = fileio.read_tensor_container(args.weights)
    if args.centers:
        centerset = centers.read_centers(args.centers)
        out_bits = params["w2" if "w2" in params else "w"].shape[0]
        if centerset.bits != out_bits:
            raise ValidationError(
                f"centers bits {centerset.bits} != encoder output {out_bits}"
            )
    dsf_mode = args.mode == "dsf"
    if dsf_mode and "dsf_head" not in params:
        raise ValidationError("dsf mode requires a dsf_head tensor in the weights")
    config = trainer.TrainConfig(
        dsf_enabled=dsf_mode,
        t_upper_bound=args.t_bound,
        hidden_dim=params["w1"].shape[0] if "w1" in params else None,
    )
    codes = trainer.encode_features(params, features, config)
    binhash.write_codes(args.out, codes)
    emit_manifest(args.out, "encode", args, [args.features, args.weights] + ([args.centers] if args.centers else []))
    print(f"wrote {codes.count} codes of {codes.bits} bits to {args.out}", file=sys.stderr)
    return EXIT_OK


def cmd_index(args: argparse.Namespace) -> int:
    codes = binhash.read_codes(args.codes)
    ids, labels = read_label_file(args.labels)
    index = retrieval.build_index(codes, ids, labels, label_space=args.label_space)
    retrieval.write_index(args.out, index)
    emit_manifest(args.out, "index", args, [args.codes, args.labels])
    print(f"indexed {index.count} items ({index.codes.bits} bits) to {args.out}", file=sys.stderr)
    return EXIT_OK


def cmd_query(args: argparse.Namespace) -> int:
    index = retrieval.read_index(args.index)
    queries = binhash.read_codes(args.queries)
    if not 0 <= args.row < queries.count:
        raise ValidationError(f"query row {args.row} out of range (N={queries.count})")
    if queries.bits != index.codes.bits:
        raise ValidationError(
            f"query bits {queries.bits} != index bits {index.codes.bits}"
        )
    result = retrieval.query_topk(index, queries.row(args.row), args.k)
    for item_id, distance in zip(result.ids, result.distances):
        print(f"{item_id} {distance}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    index = retrieval.read_index(args.index)
    queries = binhash.read_codes(args.queries)
    ids, labels = read_label_file(args.query_labels)
    if len(labels) != queries.count:
        raise ValidationError(
            f"{len(labels)} query labels for {queries.count} query codes"
        )
    value = retrieval.map_at_k(
        index,
        queries,
        labels,
        k=args.k,
        include_zero_relevant=args.include_zero_relevant,
        denominator=args.denominator,
        threads=args.threads,
    )
    rows = []
    for i in range(queries.count):
        single = retrieval.map_at_k(
            index,
            queries.data[i : i + 1],
            [labels[i]],
            k=args.k,
            include_zero_relevant=True,
            denominator=args.denominator,
        )
        rows.append([int(ids[i]), f"{single:.6f}"])
    write_csv(args.csv, ["query_id", "average_precision"], rows)
    emit_manifest(args.csv, "eval", args, [args.index, args.queries, args.query_labels])
    print(f"{value:.4f}")
    return EXIT_OK


def cmd_train_demo(args: argparse.Namespace) -> int:
    os.makedirs(args.out_dir, exist_ok=True)
    spec = trainer.SyntheticSpec(
        n_classes=args.classes,
        samples_per_class=args.per_class,
        input_dim=args.dim,
        noise_sigma=args.sigma,
        seed=args.seed,
    )
    loss = LossConfig(variant="cosface", quantization_mode="dsf_surrogate", lam=1.0)
    config = trainer.TrainConfig(
        epochs=args.epochs,
        learning_rate=args.lr,
        loss=loss,
        dsf_enabled=True,
        seed=args.seed,
    )
    bench = trainer.run_benchmark(config, spec, code_bits=args.bits)
    history_path = os.path.join(args.out_dir, "history.csv")
    write_csv(
        history_path,
        ["epoch", "metric_loss", "quant_loss", "total", "mAP_eval", "mean_imbalance", "t_value"],
        [
            [
                r.epoch,
                f"{r.metric_loss:.8f}",
                f"{r.quant_loss:.8f}",
                f"{r.total:.8f}",
                f"{r.map_eval:.6f}",
                f"{r.mean_imbalance:.6f}",
                f"{r.t_value:.8f}",
            ]
            for r in bench.history
        ],
    )
    emit_manifest(history_path, "train-demo", args, [])
    weights_path = os.path.join(args.out_dir, "encoder.weights")
    fileio.write_tensor_container(weights_path, bench.params)
    print(f"benchmark mAP@100 {bench.map_at_100:.4f}")

    if not args.skip_ablation:
        train_x, train_y, query_x, query_y = trainer.split_benchmark_data(spec)
        problem = centers.ProblemConfig(
            n_samples=train_y.size,
            n_classes=spec.n_classes,
            input_dim=spec.input_dim,
            code_bits=args.bits,
        )
        centerset = centers.generate_centers(problem, seed=spec.seed)
        rows = trainer.ablation_matrix(
            trainer.standard_variants(config), train_x, train_y, centerset, query_x, query_y
        )
        ablation_path = os.path.join(args.out_dir, "ablation.csv")
        write_csv(
            ablation_path,
            ["variant", "mAP_eval", "mean_imbalance", "max_imbalance", "metric_loss", "quant_loss", "total"],
            [
                [
                    row.name,
                    f"{row.map_eval:.6f}",
                    f"{row.mean_imbalance:.6f}",
                    row.max_imbalance,
                    f"{row.metric_loss:.8f}",
                    f"{row.quant_loss:.8f}",
                    f"{row.total:.8f}",
                ]
                for row in rows
            ],
        )
        emit_manifest(ablation_path, "train-demo", args, [])
        for row in rows:
            print(f"ablation {row.name}: mAP@100 {row.map_eval:.4f}")

    if args.svg:
        svg_path = os.path.join(args.out_dir, "curves.svg")
        fileio.atomic_write(svg_path, render_curves_svg(bench.history).encode())
        emit_manifest(svg_path, "train-demo", args, [])
    return EXIT_OK


def cmd_aie(args: argparse.Namespace) -> int:
    f3 = fileio.read_tensor(args.local)
    f4 = fileio.read_tensor(getattr(args, "global"))
    if f3.ndim != 3 or f4.ndim != 3:
        raise ValidationError("feature maps must be 3-D (c, h, w)")
    config = aie.AieConfig(
        window_sizes=parse_int_tuple(args.windows, 2, "--windows"),
        global_desc_dim=args.desc_dim,
        global_reduced_dim=args.reduced_dim,
        local_dim=args.desc_dim,
        path_channels=parse_int_tuple(args.path_channels, 2, "--path-channels"),
        aspp_dilations=parse_int_tuple(args.dilations, 3, "--dilations"),
        hash_bits=args.bits,
        orthonormalize_fg=args.orthonormalize,
    )
    inputs = [args.local, getattr(args, "global")]
    if args.weights:
        weights = aie.load_weights(args.weights)
        inputs += [args.weights, args.weights + ".json"]
    else:
        weights = aie.init_weights(
            config, c3=f3.shape[0], c4=f4.shape[0], global_hw=f4.shape[1:], seed=args.seed
        )
        if args.save_weights:
            # extract with exactly the (float32) tensors that were persisted so
            # a rerun from the saved file reproduces the output bit-for-bit
            aie.save_weights(args.save_weights, weights)
            weights = aie.load_weights(args.save_weights)
    extracted = aie.extract_feature(f3, f4, weights, config)
    fileio.write_tensor(args.out, extracted.f_e)
    if args.save_weights and args.weights:
        aie.save_weights(args.save_weights, weights)
    emit_manifest(args.out, "aie", args, inputs)
    print(f"wrote {extracted.f_e.shape[0]}-dim feature to {args.out}", file=sys.stderr)
    return EXIT_OK


def render_curves_svg(history: list[trainer.EpochRecord]) -> str:
    """Minimal deterministic SVG with the total-loss and mAP curves."""
    width, height, pad = 640, 360, 40
    epochs = [r.epoch for r in history]
    losses = [r.total for r in history]
    maps = [0.0 if np.isnan(r.map_eval) else r.map_eval for r in history]
    span_x = max(epochs[-1], 1) if epochs else 1
    max_loss = max(max(losses), 1e-9) if losses else 1.0

    def poly(values: list[float], top: float) -> str:
        points = " ".join(
            f"{pad + (width - 2 * pad) * e / span_x:.2f},"
            f"{height - pad - (height - 2 * pad) * v / top:.2f}"
            for e, v in zip(epochs, values)
        )
        return points

    return (
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">\n'
        f'<rect width="{width}" height="{height}" fill="white"/>\n'
        f'<polyline fill="none" stroke="#c0392b" stroke-width="1.5" points="{poly(losses, max_loss)}"/>\n'
        f'<polyline fill="none" stroke="#2980b9" stroke-width="1.5" points="{poly(maps, 1.0)}"/>\n'
        f'<text x="{pad}" y="20" font-size="12" fill="#c0392b">total loss (max {max_loss:.4f})</text>\n'
        f'<text x="{width // 2}" y="20" font-size="12" fill="#2980b9">mAP@100 (0..1)</text>\n'
        "</svg>\n"
    )


# --- argument parsing ------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cshash",
        description="Hash-center binary encoding and Hamming retrieval toolkit",
    )
    parser.add_argument("--version", action="version", version=cshash.__version__)
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("centers", help="generate hash centers (CSHC)")
    p.add_argument("--bits", type=int, required=True)
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_centers)

    p = sub.add_parser("encode", help="binarize encoder outputs (CSBC)")
    p.add_argument("--features", required=True, help="CSFT matrix, N x D")
    p.add_argument("--weights", required=True, help="encoder weights container")
    p.add_argument("--centers", default=None, help="optional CSHC for width validation")
    p.add_argument("--mode", choices=("sign", "dsf"), default="sign")
    p.add_argument("--t-bound", type=float, default=0.005, dest="t_bound")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("index", help="build a retrieval index (CSIX)")
    p.add_argument("--codes", required=True)
    p.add_argument("--labels", required=True, help="CSV id,labels (';'-joined)")
    p.add_argument("--label-space", type=int, default=None, dest="label_space")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_index)

    p = sub.add_parser("query", help="top-k Hamming neighbors of one query")
    p.add_argument("--index", required=True)
    p.add_argument("--queries", required=True, help="CSBC of query codes")
    p.add_argument("--row", type=int, default=0)
    p.add_argument("--k", type=int, default=10)
    p.set_defaults(func=cmd_query)

    p = sub.add_parser("eval", help="mAP@k of query codes against an index")
    p.add_argument("--index", required=True)
    p.add_argument("--queries", required=True)
    p.add_argument("--query-labels", required=True, dest="query_labels")
    p.add_argument("--k", type=int, default=100)
    p.add_argument("--csv", default="eval.csv", help="per-query AP table path")
    p.add_argument("--include-zero-relevant", action="store_true", dest="include_zero_relevant")
    p.add_argument("--denominator", choices=retrieval.AP_DENOMINATORS, default="retrieved")
    p.add_argument("--threads", type=int, default=default_threads())
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("train-demo", help="synthetic benchmark + loss ablation grid")
    p.add_argument("--out-dir", required=True, dest="out_dir")
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--bits", type=int, default=16)
    p.add_argument("--classes", type=int, default=20)
    p.add_argument("--per-class", type=int, default=100, dest="per_class")
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--sigma", type=float, default=0.05)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--skip-ablation", action="store_true", dest="skip_ablation")
    p.add_argument("--svg", action="store_true", help="emit loss/mAP curves as SVG")
    p.set_defaults(func=cmd_train_demo)

    p = sub.add_parser("aie", help="run the two-branch extraction on CSFT maps")
    p.add_argument("--local", required=True, help="mid-level map CSFT (c3, h2, w2)")
    p.add_argument("--global", required=True, help="high-level map CSFT (c4, h, w)")
    p.add_argument("--weights", default=None, help="weights container (else seeded init)")
    p.add_argument("--save-weights", default=None, dest="save_weights")
    p.add_argument("--bits", type=int, default=16)
    p.add_argument("--desc-dim", type=int, default=128, dest="desc_dim")
    p.add_argument("--reduced-dim", type=int, default=32, dest="reduced_dim")
    p.add_argument("--windows", default="2,4")
    p.add_argument("--dilations", default="1,2,3")
    p.add_argument("--path-channels", default="32,16", dest="path_channels")
    p.add_argument("--orthonormalize", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_aie)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (RuntimeError, OSError) as exc:
        print(f"failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
