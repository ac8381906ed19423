"""Command-line front end for the container, codec, store, transport, and trainer.

Every subcommand prints human-readable text and finishes with a single
machine-parsable ``RESULT key=value ...`` line so scripts can consume the
same output. Exit codes: 0 success, 1 domain error, 2 usage error.
"""

from __future__ import annotations

import argparse
import sys

import numpy as np

from . import reuse
from .codec import (
    QuantizationParams,
    compute_delta,
    decode_packet,
    encode_packet,
    packet_from_bytes,
    packet_to_bytes,
    quantize_delta,
    quantize_model,
    reconstruct,
    size_report,
)
from .core import (
    MAGIC,
    ModelArtifact,
    ModelPipeError,
    ModelVersionId,
    WeightTensor,
    deserialize_model,
    serialize_model,
    weight_checksum,
)
from .codec import PACKET_MAGIC
from .registry import STORE_ENV_VAR, RegistryStore
from .transport import ModelReceiver, push_model


class UsageError(Exception):
    """A flag combination argparse cannot reject on its own."""


# --- output helpers ---------------------------------------------------------


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return f"{value:.10g}"
    return str(value)


def print_result(**fields) -> None:
    """Emit the machine-parsable summary line. Keys keep insertion order."""
    print("RESULT " + " ".join(f"{k}={_fmt(v)}" for k, v in fields.items()))


def print_table(headers: list[str], rows: list[list]) -> None:
    cells = [[_fmt(c) for c in row] for row in rows]
    widths = [
        max(len(h), *(len(r[i]) for r in cells)) if cells else len(h)
        for i, h in enumerate(headers)
    ]
    print("  ".join(h.ljust(w) for h, w in zip(headers, widths)).rstrip())
    print("  ".join("-" * w for w in widths))
    for row in cells:
        out = [c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(row, widths))]
        print("  ".join(out).rstrip())


def _shape_str(shape: tuple[int, ...]) -> str:
    return "x".join(str(d) for d in shape) if shape else "scalar"


# --- file helpers -----------------------------------------------------------


def _read_model(path: str) -> ModelArtifact:
    with open(path, "rb") as fh:
        return deserialize_model(fh.read())


def _write_model(model: ModelArtifact, path: str) -> int:
    blob = serialize_model(model)
    with open(path, "wb") as fh:
        fh.write(blob)
    return len(blob)


def _read_packet(path: str):
    with open(path, "rb") as fh:
        return packet_from_bytes(fh.read())


def _params_from(args) -> QuantizationParams:
    try:
        return QuantizationParams(args.sbits, args.qbits, args.f)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def _open_store(args) -> RegistryStore:
    try:
        return RegistryStore(args.store)
    except ValueError as exc:
        raise UsageError(f"{exc} (pass --store or set {STORE_ENV_VAR})") from exc


# --- subcommands ------------------------------------------------------------


def cmd_pack(args) -> int:
    with np.load(args.weights) as npz:
        layers = [WeightTensor(name, npz[name].shape, npz[name]) for name in npz.files]
    model = ModelArtifact(args.model_id, args.version, args.parent, layers)
    size = _write_model(model, args.out)
    print_table(
        ["layer", "shape", "weights"],
        [[t.name, _shape_str(t.shape), t.data.size] for t in model.layers],
    )
    print_result(
        model_id=model.model_id,
        version=model.version,
        layers=len(model.layers),
        weights=model.weight_count,
        bytes=size,
        checksum=f"{weight_checksum(model):016x}",
    )
    return 0


def cmd_inspect(args) -> int:
    with open(args.file, "rb") as fh:
        blob = fh.read()
    if blob[:4] == MAGIC:
        model = deserialize_model(blob)
        parent = "none" if model.parent_version is None else model.parent_version
        print(f"model {model.model_id} version {model.version} parent {parent}")
        print_table(
            ["layer", "shape", "weights", "bytes"],
            [[t.name, _shape_str(t.shape), t.data.size, t.data.nbytes] for t in model.layers],
        )
        print_result(
            kind="model",
            model_id=model.model_id,
            version=model.version,
            parent=parent,
            layers=len(model.layers),
            weights=model.weight_count,
            bytes=len(blob),
            digest=f"{model.architecture_digest:016x}",
            checksum=f"{weight_checksum(model):016x}",
        )
        return 0
    if blob[:4] == PACKET_MAGIC:
        pkt = packet_from_bytes(blob)
        p = pkt.params
        print(
            f"packet {pkt.target.model_id} v{pkt.base.version} -> v{pkt.target.version}"
            f"  sbits={p.s_bits} qbits={p.q_bits} f={p.f:g}"
        )
        print_table(
            ["layer", "shape", "weights", "payload bytes"],
            [[l.name, _shape_str(l.shape), int(np.prod(l.shape, dtype=np.int64)), len(l.payload)] for l in pkt.layers],
        )
        print_result(
            kind="packet",
            model_id=pkt.target.model_id,
            base_version=pkt.base.version,
            target_version=pkt.target.version,
            sbits=p.s_bits,
            qbits=p.q_bits,
            f=p.f,
            layers=len(pkt.layers),
            weights=pkt.weight_count,
            payload_bytes=pkt.payload_bytes,
            bytes=len(blob),
            checksum=f"{pkt.checksum:016x}",
        )
        return 0
    print(f"error: {args.file} is neither a model nor a packet", file=sys.stderr)
    return 1


def _print_size_report(report) -> None:
    print_table(
        ["metric", "value"],
        [
            ["weights", report.weight_count],
            ["baseline bytes", report.baseline_bytes],
            ["payload bytes", report.payload_bytes],
            ["packet bytes", report.packet_bytes],
            ["compression ratio", f"{report.compression_ratio:.2f}"],
            ["entropy bits/weight", f"{report.entropy_bits_per_weight:.3f}"],
        ],
    )


def cmd_diff(args) -> int:
    params = _params_from(args)
    base = _read_model(args.base)
    target = _read_model(args.target)
    pkt = encode_packet(quantize_delta(compute_delta(target, base), params), base)
    blob = packet_to_bytes(pkt)
    with open(args.out, "wb") as fh:
        fh.write(blob)
    report = size_report(pkt)
    _print_size_report(report)
    print_result(
        model_id=target.model_id,
        base_version=base.version,
        target_version=target.version,
        sbits=params.s_bits,
        qbits=params.q_bits,
        f=params.f,
        payload_bytes=report.payload_bytes,
        packet_bytes=report.packet_bytes,
        ratio=report.compression_ratio,
        entropy=report.entropy_bits_per_weight,
    )
    return 0


def cmd_apply(args) -> int:
    pkt = _read_packet(args.packet)
    base = None
    if pkt.base.version >= 0:
        if args.base is None:
            raise UsageError("packet encodes a delta; --base is required")
        base = _read_model(args.base)
        if base.id != pkt.base:
            print(
                f"error: base mismatch: packet wants {pkt.base.model_id} "
                f"v{pkt.base.version}, got {base.model_id} v{base.version}",
                file=sys.stderr,
            )
            return 1
    model = reconstruct(decode_packet(pkt), base)
    got = weight_checksum(model)
    if got != pkt.checksum:
        print(
            f"error: checksum mismatch: packet says {pkt.checksum:016x}, "
            f"reconstruction gives {got:016x}",
            file=sys.stderr,
        )
        return 1
    size = _write_model(model, args.out)
    bound = pkt.params.error_bound
    print(f"max per-weight reconstruction step: {bound:.10g}")
    print_result(
        model_id=model.model_id,
        version=model.version,
        weights=model.weight_count,
        bytes=size,
        bound=bound,
        checksum=f"{got:016x}",
    )
    return 0


def cmd_stats(args) -> int:
    pkt = _read_packet(args.file)
    report = size_report(pkt)
    _print_size_report(report)
    print_result(
        model_id=pkt.target.model_id,
        base_version=pkt.base.version,
        target_version=pkt.target.version,
        weights=report.weight_count,
        payload_bytes=report.payload_bytes,
        packet_bytes=report.packet_bytes,
        ratio=report.compression_ratio,
        entropy=report.entropy_bits_per_weight,
    )
    return 0


def cmd_bench_quant(args) -> int:
    try:
        sweep = [int(tok) for tok in args.sweep.split(",") if tok.strip()]
    except ValueError as exc:
        raise UsageError(f"bad --sweep: {exc}") from exc
    if not sweep:
        raise UsageError("--sweep is empty")
    for cb in sweep:
        if cb < 0:
            raise UsageError(f"compression bits must be >= 0, got {cb}")
        if args.sbits - cb < 0:
            raise UsageError(f"compression bits {cb} exceed sbits {args.sbits}")
    base = _read_model(args.base)
    target = _read_model(args.target)
    delta = compute_delta(target, base)
    rows = []
    last = None
    for cb in sweep:
        try:
            params = QuantizationParams(args.sbits, args.sbits - cb, args.f)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
        delta_rep = size_report(encode_packet(quantize_delta(delta, params), base))
        whole_rep = size_report(encode_packet(quantize_model(target, params), None))
        rows.append(
            [
                cb,
                delta_rep.payload_bytes,
                whole_rep.payload_bytes,
                f"{delta_rep.compression_ratio:.2f}",
                f"{whole_rep.compression_ratio:.2f}",
                f"{delta_rep.entropy_bits_per_weight:.3f}",
                f"{whole_rep.entropy_bits_per_weight:.3f}",
            ]
        )
        last = (cb, delta_rep, whole_rep)
    print_table(
        ["cb", "delta bytes", "whole bytes", "delta ratio", "whole ratio", "delta bits/w", "whole bits/w"],
        rows,
    )
    cb, delta_rep, whole_rep = last
    print_result(
        model_id=target.model_id,
        rows=len(rows),
        cb=cb,
        delta_bytes=delta_rep.payload_bytes,
        whole_bytes=whole_rep.payload_bytes,
        delta_ratio=delta_rep.compression_ratio,
        whole_ratio=whole_rep.compression_ratio,
    )
    return 0


def _parse_endpoint(text: str) -> tuple[str, int]:
    host, _, port = text.rpartition(":")
    if not host or not port:
        raise UsageError(f"expected HOST:PORT, got {text!r}")
    try:
        return host, int(port)
    except ValueError as exc:
        raise UsageError(f"bad port in {text!r}: {exc}") from exc


def cmd_serve(args) -> int:
    store = _open_store(args)
    receiver = ModelReceiver(store, _parse_endpoint(args.listen))
    host, port = receiver.endpoint
    print(f"listening host={host} port={port}", flush=True)
    try:
        receiver.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        receiver.server_close()
    return 0


def cmd_push(args) -> int:
    store = _open_store(args)
    version = args.version
    if version is None:
        version = store.versions(args.model_id).latest
        if version is None:
            print(f"error: store has no versions of {args.model_id}", file=sys.stderr)
            return 1
    params = None
    if args.qbits is not None:
        params = _params_from(args)
    summary = push_model(
        store,
        _parse_endpoint(args.remote),
        ModelVersionId(args.model_id, version),
        params,
        timeout=args.timeout,
    )
    print_table(
        ["metric", "value"],
        [
            ["target version", summary.target_version],
            ["prediction version", summary.prediction_version],
            ["reused stored packet", summary.reused_packet],
            ["bytes sent", summary.bytes_sent],
            ["bytes received", summary.bytes_received],
            ["compression ratio", f"{summary.report.compression_ratio:.2f}"],
        ],
    )
    print_result(
        model_id=summary.model_id,
        target_version=summary.target_version,
        prediction_version=summary.prediction_version,
        reused=summary.reused_packet,
        bytes_sent=summary.bytes_sent,
        bytes_received=summary.bytes_received,
        ratio=summary.report.compression_ratio,
        checksum=f"{summary.checksum:016x}",
    )
    return 0


# --- train-reuse ------------------------------------------------------------

_TRAIN_DEFAULTS = {
    "gamma": 5.0,
    "sources": 3,
    "seeds": "0:3",
    "epochs": 200,
    "step_size": 2e-3,
    "batch_size": 16,
    "alpha": None,
}

_TRAIN_CASTS = {
    "gamma": float,
    "sources": int,
    "seeds": str,
    "epochs": int,
    "step_size": float,
    "batch_size": int,
    "alpha": str,
}


def parse_config_file(path: str) -> dict[str, str]:
    """Read ``key = value`` lines; ``#`` starts a comment. Keys match flags."""
    settings: dict[str, str] = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key = value")
            key, value = (part.strip() for part in line.split("=", 1))
            key = key.replace("-", "_")
            if key not in _TRAIN_DEFAULTS:
                raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
            settings[key] = value
    return settings


def parse_seed_spec(spec: str) -> list[int]:
    """``a:b`` is the half-open range; otherwise a comma-separated list."""
    spec = spec.strip()
    try:
        if ":" in spec:
            lo, hi = (int(p) for p in spec.split(":", 1))
            seeds = list(range(lo, hi))
        else:
            seeds = [int(tok) for tok in spec.split(",") if tok.strip()]
    except ValueError as exc:
        raise UsageError(f"bad seed spec {spec!r}: {exc}") from exc
    if not seeds:
        raise UsageError(f"seed spec {spec!r} names no seeds")
    return seeds


def _train_settings(args) -> dict:
    settings = dict(_TRAIN_DEFAULTS)
    if args.config is not None:
        for key, text in parse_config_file(args.config).items():
            try:
                settings[key] = _TRAIN_CASTS[key](text)
            except ValueError as exc:
                raise UsageError(f"bad config value for {key}: {exc}") from exc
    for key in _TRAIN_DEFAULTS:
        flag = getattr(args, key)
        if flag is not None:
            settings[key] = flag
    return settings


def cmd_train_reuse(args) -> int:
    cfg = _train_settings(args)
    seeds = parse_seed_spec(cfg["seeds"])
    spec = reuse.BENCHMARK_SPEC
    m = cfg["sources"]
    if not 0 <= m <= spec.num_sources:
        raise UsageError(f"--sources must be in 0..{spec.num_sources}, got {m}")
    if m == 0 and cfg["gamma"] != 0.0:
        raise UsageError("--sources 0 trains the plain baseline; it needs --gamma 0")
    alpha = None
    if cfg["alpha"] is not None:
        try:
            alpha = tuple(float(tok) for tok in cfg["alpha"].split(","))
        except ValueError as exc:
            raise UsageError(f"bad --alpha: {exc}") from exc
        if len(alpha) != m:
            raise UsageError(f"--alpha names {len(alpha)} weights for {m} sources")

    rows = []
    accuracies = []
    first = None
    for seed in seeds:
        bench = reuse.make_synthetic_domains(spec, seed)
        sources = None
        if m > 0:
            sources = reuse.SourceModelSet(
                bench.sources.models[:m], bench.sources.rep_layers[:m]
            )
        config = reuse.benchmark_config(
            cfg["gamma"],
            seed,
            alpha=alpha,
            epochs=cfg["epochs"],
            step_size=cfg["step_size"],
            batch_size=cfg["batch_size"],
        )
        result = reuse.train_target(sources, bench.target_data, config)
        tail = result.trace[-1]
        rows.append([seed, f"{tail.supervised:.4f}", f"{tail.penalty:.4f}", f"{tail.holdout:.4f}"])
        accuracies.append(tail.holdout)
        if first is None:
            first = (seed, result)

    print_table(["seed", "supervised", "penalty", "holdout acc"], rows)
    seed, result = first
    if args.trace is not None:
        with open(args.trace, "w") as fh:
            fh.write(reuse.trace_to_csv(result.trace))
        print(f"trace for seed {seed} written to {args.trace}")
    if args.save_model is not None:
        artifact = reuse.to_artifact(result.network, "reuse-target", seed)
        size = _write_model(artifact, args.save_model)
        print(f"trained network for seed {seed} written to {args.save_model} ({size} bytes)")
    acc = np.asarray(accuracies)
    print_result(
        gamma=cfg["gamma"],
        sources=m,
        seeds=len(seeds),
        epochs=cfg["epochs"],
        mean_accuracy=float(acc.mean()),
        min_accuracy=float(acc.min()),
        max_accuracy=float(acc.max()),
    )
    return 0


def cmd_verify_bound(args) -> int:
    if args.instances < 1:
        raise UsageError("--instances must be >= 1")
    rows = []
    lhs_all, rhs_all = [], []
    held = 0
    for i in range(args.instances):
        inst = reuse.make_bound_instance(args.sources, args.gamma, args.seed + i)
        rep = reuse.check_risk_bound(inst, slack=args.slack)
        rows.append(
            [rep.seed, f"{rep.lhs:.6g}", f"{rep.rhs:.6g}", f"{rep.lhs / rep.rhs:.4f}", rep.holds]
        )
        lhs_all.append(rep.lhs)
        rhs_all.append(rep.rhs)
        held += rep.holds
    print_table(["seed", "lhs", "rhs", "lhs/rhs", "holds"], rows)
    print_result(
        sources=args.sources,
        gamma=args.gamma,
        instances=args.instances,
        held=held,
        mean_lhs=float(np.mean(lhs_all)),
        mean_rhs=float(np.mean(rhs_all)),
        holds=held == args.instances,
    )
    return 0


# --- parser -----------------------------------------------------------------


def _add_quant_flags(sub, qbits_required: bool) -> None:
    sub.add_argument("--sbits", type=int, default=12, help="significand bits (default 12)")
    sub.add_argument(
        "--qbits", type=int, required=qbits_required, help="bits kept after quantization"
    )
    sub.add_argument("--f", type=float, default=0.3, help="rounding offset (default 0.3)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="modelpipe",
        description="Pack, diff, ship, and retrain model artifacts.",
    )
    parser.add_argument(
        "--store",
        default=None,
        help=f"registry directory (default from ${STORE_ENV_VAR})",
    )
    subs = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    sub = subs.add_parser("pack", help="build a model container from an .npz of arrays")
    sub.add_argument("--weights", required=True, help=".npz file; one layer per array")
    sub.add_argument("--model-id", required=True)
    sub.add_argument("--version", type=int, required=True)
    sub.add_argument("--parent", type=int, default=None)
    sub.add_argument("-o", "--out", required=True)
    sub.set_defaults(func=cmd_pack)

    sub = subs.add_parser("inspect", help="describe a model or packet file")
    sub.add_argument("file")
    sub.set_defaults(func=cmd_inspect)

    sub = subs.add_parser("diff", help="encode target - base as a quantized delta packet")
    sub.add_argument("--base", required=True)
    sub.add_argument("--target", required=True)
    _add_quant_flags(sub, qbits_required=True)
    sub.add_argument("-o", "--out", required=True)
    sub.set_defaults(func=cmd_diff)

    sub = subs.add_parser("apply", help="rebuild a model from a base plus a packet")
    sub.add_argument("--base", default=None, help="base model (omit for whole-model packets)")
    sub.add_argument("--packet", required=True)
    sub.add_argument("-o", "--out", required=True)
    sub.set_defaults(func=cmd_apply)

    sub = subs.add_parser("stats", help="print the size report of a packet file")
    sub.add_argument("file")
    sub.set_defaults(func=cmd_stats)

    sub = subs.add_parser(
        "bench-quant", help="sweep compression bits; compare delta vs whole-model packets"
    )
    sub.add_argument("--base", required=True)
    sub.add_argument("--target", required=True)
    sub.add_argument("--sbits", type=int, default=12)
    sub.add_argument("--f", type=float, default=0.3)
    sub.add_argument("--sweep", default="7,6,5,4,3", help="comma list of compression bits")
    sub.set_defaults(func=cmd_bench_quant)

    sub = subs.add_parser("serve", help="receive pushed models into the store")
    sub.add_argument("--listen", default="127.0.0.1:7465", metavar="HOST:PORT")
    sub.set_defaults(func=cmd_serve)

    sub = subs.add_parser("push", help="send a stored model version to a receiver")
    sub.add_argument("--model-id", required=True)
    sub.add_argument("--version", type=int, default=None, help="default: newest in store")
    sub.add_argument("--remote", default="127.0.0.1:7465", metavar="HOST:PORT")
    sub.add_argument("--timeout", type=float, default=30.0)
    _add_quant_flags(sub, qbits_required=False)
    sub.set_defaults(func=cmd_push)

    sub = subs.add_parser(
        "train-reuse", help="train on the bundled synthetic benchmark with source reuse"
    )
    sub.add_argument("--config", default=None, help="key = value settings file")
    sub.add_argument("--gamma", type=float, default=None)
    sub.add_argument("--sources", type=int, default=None, help="how many source models (0..3)")
    sub.add_argument("--seeds", default=None, help="a:b range or comma list (default 0:3)")
    sub.add_argument("--epochs", type=int, default=None)
    sub.add_argument("--step-size", type=float, default=None)
    sub.add_argument("--batch-size", type=int, default=None)
    sub.add_argument("--alpha", default=None, help="comma list of source weights")
    sub.add_argument("--trace", default=None, help="write first seed's trace CSV here")
    sub.add_argument("--save-model", default=None, help="write first seed's network here")
    sub.set_defaults(func=cmd_train_reuse)

    sub = subs.add_parser("verify-bound", help="check the transfer risk bound numerically")
    sub.add_argument("--sources", type=int, default=2)
    sub.add_argument("--gamma", type=float, default=5.0)
    sub.add_argument("--seed", type=int, default=0)
    sub.add_argument("--instances", type=int, default=1)
    sub.add_argument("--slack", type=float, default=0.05)
    sub.set_defaults(func=cmd_verify_bound)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except ModelPipeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
