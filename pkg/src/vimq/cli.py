"""Command-line surface: generate/quantize models, run inference, sweep the
(weight bits x block size) grid, and run the oracle self-test suite.

Exit codes: 0 success, 2 validation error, 3 numerical-invariant failure.
All commands are deterministic for identical files, flags and env.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from ._kernels import active_backend, thread_count
from .config import ModelConfig, load_config_file
from .container import Tensor, write_container
from .counters import CounterRecord, PerfCounters
from .model import (
    Model,
    model_forward,
    quantize_model,
    random_images,
    random_model,
)
from .selftest import run_selftest
from .store import (
    load_images,
    load_model,
    save_images,
    save_model,
    save_packed_weights,
)


class CliError(Exception):
    """Validation failure; message goes to stderr, exit code 2."""


# -- metrics -------------------------------------------------------------------


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    a = a.astype(np.float64).ravel()
    b = b.astype(np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return 1.0 if na == nb else 0.0
    return float(np.dot(a, b) / (na * nb))


def error_metrics(got: np.ndarray, ref: np.ndarray) -> dict[str, float]:
    diff = np.abs(got.astype(np.float64) - ref.astype(np.float64))
    scale = max(float(np.max(np.abs(ref))), 1e-30)
    return {
        "max_abs": float(np.max(diff)) if diff.size else 0.0,
        "rel": float(np.max(diff)) / scale if diff.size else 0.0,
        "cosine": cosine(got, ref),
    }


@dataclass
class EvalReport:
    """Float-reference vs quantized comparison on identical inputs."""

    per_layer: dict[str, dict[str, float]] = field(default_factory=dict)
    end_to_end: dict[str, float] = field(default_factory=dict)


def compare_paths(model: Model, images: np.ndarray) -> EvalReport:
    """Run both paths of a quantized model, tapping each block's output."""
    taps: dict[str, dict[str, np.ndarray]] = {"float": {}, "quantized": {}}

    def make_tap(mode: str):
        def tap(name: str, x: np.ndarray) -> None:
            if name.endswith(".out"):
                taps[mode][name] = x.copy()

        return tap

    ref = model_forward(model, images, "float", tap=make_tap("float"))
    got = model_forward(model, images, "quantized", tap=make_tap("quantized"))
    report = EvalReport()
    for name in taps["float"]:
        report.per_layer[name] = error_metrics(taps["quantized"][name], taps["float"][name])
    report.end_to_end = error_metrics(got, ref)
    return report


def top1_accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.argmax(logits, axis=1) == labels))


# -- shared helpers -------------------------------------------------------------


def _merge_counters(pc: PerfCounters) -> list[CounterRecord]:
    """Sum counter records per (layer, engine), sorted for stable reports."""
    merged: dict[tuple[str, str], CounterRecord] = {}
    for r in pc.records:
        key = (r.layer, r.engine)
        if key in merged:
            m = merged[key]
            merged[key] = CounterRecord(
                layer=r.layer,
                engine=r.engine,
                tokens=m.tokens + r.tokens,
                tiles=m.tiles + r.tiles,
                lut_builds=m.lut_builds + r.lut_builds,
                pe_selects=m.pe_selects + r.pe_selects,
                words_streamed=m.words_streamed + r.words_streamed,
                macs=m.macs + r.macs,
                state_updates=m.state_updates + r.state_updates,
            )
        else:
            merged[key] = r
    return [merged[k] for k in sorted(merged)]


def _jsonl(records: list[dict]) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in records)


def _model_cfg(args: argparse.Namespace, base: ModelConfig) -> ModelConfig:
    cfg = base
    if getattr(args, "config", None):
        cfg = load_config_file(args.config, base=cfg)
    return cfg


def _load_float_model(path: str) -> Model:
    model = load_model(path)
    if model.kind != "float":
        raise CliError(f"{path}: expected a float model, got kind={model.kind}")
    return model


# -- subcommands ----------------------------------------------------------------


def cmd_gen(args: argparse.Namespace) -> int:
    if args.kind == "images":
        images = random_images(args.n, args.resolution, args.seed)
        labels = None
        if args.labels:
            rng = np.random.default_rng(args.seed + 1)
            labels = rng.integers(0, args.labels, args.n).astype(np.int32)
        save_images(args.out, images, labels)
        print(f"wrote {args.n} images at {args.resolution}x{args.resolution} -> {args.out}")
        return 0
    cfg = ModelConfig(variant=args.variant)
    if args.depth:
        cfg = replace(cfg, depth=args.depth)
    if args.d_model:
        cfg = replace(cfg, d_model=args.d_model)
    if args.classes:
        cfg = replace(cfg, n_classes=args.classes)
    cfg = _model_cfg(args, cfg)
    model = random_model(cfg, args.seed)
    save_model(args.out, model)
    print(
        f"wrote float {cfg.variant} model (d={cfg.width}, depth={cfg.depth}, "
        f"classes={cfg.n_classes}) -> {args.out}"
    )
    return 0


def cmd_quantize(args: argparse.Namespace) -> int:
    if args.block is not None and args.block < 1:
        raise CliError("block size must be >= 1")
    model = _load_float_model(args.model)
    cfg = _model_cfg(args, model.cfg)
    if args.bits is not None:
        cfg = replace(cfg, weight_bits=args.bits)
    if args.block is not None:
        cfg = replace(cfg, block_size=args.block)
    if args.alpha is not None:
        cfg = replace(cfg, alpha=args.alpha)
    if args.no_smooth:
        cfg = replace(cfg, smooth=False)
    if args.static_act:
        cfg = replace(cfg, act_mode="static")
    if args.per_tensor_act:
        cfg = replace(cfg, act_granularity="per_tensor")
    if cfg.tile % cfg.block_size:
        tile = next((t for t in (16, 32, 64) if t % cfg.block_size == 0), None)
        if tile is None:
            raise CliError(f"block size {cfg.block_size} divides no supported tile (16/32/64)")
        cfg = replace(cfg, tile=tile)
    try:
        cfg.codebook()
    except KeyError:
        raise CliError(f"no default codebook basis for weight_bits={cfg.weight_bits}") from None

    calib = None
    if cfg.smooth or cfg.act_mode == "static":
        if not args.calib:
            raise CliError("--calib required unless --no-smooth with dynamic activations")
        calib, _ = load_images(args.calib)
        calib = calib[: cfg.calib_samples]

    qm, mse = quantize_model(model, calib, cfg)
    save_model(args.out, qm)
    for name in sorted(mse):
        print(f"  {name}: weight mse {mse[name]:.6e}")
    print(f"quantized W{cfg.weight_bits} B{cfg.block_size} ({len(mse)} layers) -> {args.out}")

    packed_path = args.packed
    if packed_path is None and cfg.codebook().code_bits <= 4:
        packed_path = args.out + "w" if args.out.endswith(".vimq") else args.out + ".vimqw"
    if packed_path:
        if cfg.codebook().code_bits > 4:
            raise CliError(f"{cfg.weight_bits}-bit codes do not fit the 4-bit packed format")
        save_packed_weights(packed_path, qm)
        print(f"packed word streams -> {packed_path}")
    return 0


def cmd_infer(args: argparse.Namespace) -> int:
    model = load_model(args.model)
    images, labels = load_images(args.input)
    modes = ("float", "quantized") if args.mode == "both" else (args.mode,)
    if "quantized" in modes and model.kind != "quantized":
        raise CliError(f"{args.model}: mode {args.mode} needs a quantized model")

    records: list[dict] = []
    logits_by_mode: dict[str, np.ndarray] = {}
    for mode in modes:
        pc = PerfCounters() if mode == "quantized" else None
        logits = model_forward(model, images, mode, counters=pc)
        logits_by_mode[mode] = logits
        digest = hashlib.sha256(np.ascontiguousarray(logits).tobytes()).hexdigest()
        run: dict = {
            "record": "run",
            "mode": mode,
            "model": args.model,
            "kind": model.kind,
            "images": int(images.shape[0]),
            "resolution": [int(images.shape[2]), int(images.shape[3])],
            "tokens": model.cfg.tokens(images.shape[2]) if images.shape[2] == images.shape[3] else None,
            "backend": active_backend(),
            "threads": thread_count(),
            "logits_sha256": digest,
        }
        if labels is not None:
            run["top1"] = top1_accuracy(logits, labels)
        records.append(run)
        if pc is not None:
            records.extend({"record": "counter", **asdict(r)} for r in _merge_counters(pc))
        print(f"{mode}: logits {logits.shape}, sha256 {digest[:16]}...")
        if labels is not None:
            print(f"{mode}: top-1 {run['top1']:.4f} over {len(labels)} labeled images")

    if len(modes) == 2:
        report = compare_paths(model, images)
        records.append(
            {
                "record": "compare",
                "end_to_end": report.end_to_end,
                "per_layer": report.per_layer,
            }
        )
        print(
            "float vs quantized: cosine {cosine:.6f}, max abs {max_abs:.4e}, rel {rel:.4e}".format(
                **report.end_to_end
            )
        )

    if args.out:
        entries = {
            f"logits.{mode}": Tensor("f32", logits_by_mode[mode]) for mode in modes
        }
        write_container(args.out, entries)
        print(f"logits -> {args.out}")
    if args.report:
        with open(args.report, "w", encoding="utf-8") as fh:
            fh.write(_jsonl(records))
        print(f"report -> {args.report}")
    return 0


def cmd_dse(args: argparse.Namespace) -> int:
    try:
        bits = [int(b) for b in args.bits.split(",") if b.strip()]
        blocks = [int(b) for b in args.blocks.split(",") if b.strip()]
    except ValueError as exc:
        raise CliError(f"bad grid spec: {exc}") from None
    if not bits or not blocks:
        raise CliError("empty DSE grid")
    model = _load_float_model(args.model)
    calib, calib_labels = load_images(args.calib)
    if args.input:
        images, labels = load_images(args.input)
    else:
        images, labels = calib, calib_labels
    if args.metric == "top1" and labels is None:
        raise CliError("--metric top1 needs labels in the evaluation container")

    ref = model_forward(model, images, "float")
    grid = []
    for w in bits:
        for b in blocks:
            cfg = replace(model.cfg, weight_bits=w, block_size=b)
            if cfg.tile % b:
                tile = next((t for t in (16, 32, 64) if t % b == 0), None)
                if tile is None:
                    raise CliError(f"block size {b} divides no supported tile (16/32/64)")
                cfg = replace(cfg, tile=tile)
            try:
                cfg.codebook()
            except KeyError:
                raise CliError(f"no default codebook basis for weight_bits={w}") from None
            qm, mse = quantize_model(model, calib, cfg)
            logits = model_forward(qm, images, "quantized")
            rec = {
                "bits": w,
                "block": b,
                "cosine": cosine(logits, ref),
                "mse_total": sum(mse.values()),
                "mse_per_layer": {k: mse[k] for k in sorted(mse)},
            }
            if labels is not None:
                rec["top1"] = top1_accuracy(logits, labels)
                rec["top1_float"] = top1_accuracy(ref, labels)
            grid.append(rec)
            shown = rec["top1"] if args.metric == "top1" else rec["cosine"]
            print(f"W={w} B={b}: {args.metric} {shown:.6f}, mse_total {rec['mse_total']:.6e}")
    doc = {"metric": args.metric, "records": grid}
    with open(args.out, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(f"{len(grid)} grid records -> {args.out}")
    return 0


def cmd_selftest(_args: argparse.Namespace) -> int:
    results = run_selftest()
    for r in results:
        print(f"[{'PASS' if r.ok else 'FAIL'}] {r.name}: {r.detail}")
    failed = [r for r in results if not r.ok]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return 3 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="vimq",
        description="W4A8 vision-Mamba quantization toolkit and engine simulator",
    )
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a random float model or image batch")
    g.add_argument("--kind", choices=("model", "images"), default="model")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--variant", choices=("tiny", "small", "base"), default="tiny")
    g.add_argument("--depth", type=int, default=0, help="override block count")
    g.add_argument("--d-model", type=int, default=0, help="override hidden width")
    g.add_argument("--classes", type=int, default=0, help="override head classes")
    g.add_argument("--config", help="key=value config file overriding model fields")
    g.add_argument("--n", type=int, default=4, help="images: batch size")
    g.add_argument("--resolution", type=int, default=224, help="images: square size")
    g.add_argument("--labels", type=int, default=0, help="images: attach random labels in [0, N)")
    g.set_defaults(func=cmd_gen)

    q = sub.add_parser("quantize", help="calibrate, smooth and quantize a float model")
    q.add_argument("--model", required=True)
    q.add_argument("--calib", help="image container for calibration")
    q.add_argument("--out", required=True)
    q.add_argument("--packed", help="packed word-stream output (default: <out>w)")
    q.add_argument("--bits", type=int)
    q.add_argument("--block", type=int)
    q.add_argument("--alpha", type=float)
    q.add_argument("--no-smooth", action="store_true")
    q.add_argument("--static-act", action="store_true")
    q.add_argument("--per-tensor-act", action="store_true")
    q.add_argument("--config")
    q.set_defaults(func=cmd_quantize)

    i = sub.add_parser("infer", help="run a model on an image container")
    i.add_argument("--model", required=True)
    i.add_argument("--input", required=True)
    i.add_argument("--mode", choices=("float", "quantized", "both"), default="quantized")
    i.add_argument("--report", help="JSON-lines run/counter/compare report")
    i.add_argument("--out", help="logits container")
    i.set_defaults(func=cmd_infer)

    d = sub.add_parser("dse", help="sweep weight bits x block size")
    d.add_argument("--model", required=True)
    d.add_argument("--calib", required=True)
    d.add_argument("--bits", default="3,4,5")
    d.add_argument("--blocks", default="16,32,64")
    d.add_argument("--metric", choices=("cosine", "top1"), default="cosine")
    d.add_argument("--input", help="evaluation images (default: the calibration set)")
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_dse)

    s = sub.add_parser("selftest", help="run the oracle-equivalence suite")
    s.set_defaults(func=cmd_selftest)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FloatingPointError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
