"""Command-line pipeline: data, training, probes, measurements and reports.

Every command writes its artifacts atomically plus a ``*.manifest.json``
beside the primary output.  ``rerun`` replays a manifest and regenerates the
same bytes.  Failures exit nonzero with one JSON object on stderr.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from pathlib import Path

from . import __version__, measure, plotting, streaming
from .data import TASK_KINDS, FormatError, SyntheticTaskSpec, generate, load_matrix, save_matrix
from .io import read_json, write_csv, write_json
from .model import POSITIONAL_MODES, CheckpointError, ModelConfig, TransformerEncoder
from .train import (DEFAULT_PROBE_CONFIG, ProbeClassifier, TrainConfig, TrainingDiverged,
                    probe_error, resolve_layer, train_probe, train_supervised)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_MISSING_INPUT = 3
EXIT_BAD_INPUT = 4
EXIT_BUDGET = 5
EXIT_DIVERGED = 6
EXIT_NOT_REPRODUCED = 7

DEFAULT_MAX_FRAMES = 50_000

TRUNC_HEADER = ("model_id", "layer", "W", "window_seconds", "distance", "value", "frames",
                "full_error", "truncated_error")


class CliError(Exception):
    def __init__(self, kind: str, message: str, code: int):
        super().__init__(message)
        self.kind = kind
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError("usage", f"{self.prog}: {message}", EXIT_USAGE)


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _need(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise CliError("missing_input", f"input file not found: {p}", EXIT_MISSING_INPUT)
    return p


def _load_dataset(path):
    try:
        return load_matrix(_need(path))
    except FormatError as exc:
        raise CliError("bad_input", str(exc), EXIT_BAD_INPUT) from exc


def _load_model(path):
    try:
        return TransformerEncoder.load(_need(path))
    except (CheckpointError, KeyError, TypeError) as exc:
        raise CliError("bad_input", f"{path}: {exc}", EXIT_BAD_INPUT) from exc


def _load_probe(path):
    try:
        return ProbeClassifier.load(_need(path))
    except (CheckpointError, ValueError, KeyError) as exc:
        raise CliError("bad_input", f"{path}: {exc}", EXIT_BAD_INPUT) from exc


def _int_list(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _opt_int_list(text: str) -> list[int | None]:
    """Comma-separated frame counts where ``inf`` means unlimited."""
    out = []
    for v in text.split(","):
        v = v.strip().lower()
        if not v:
            continue
        if v in ("inf", "none", "unlimited"):
            out.append(None)
            continue
        try:
            out.append(int(v))
        except ValueError as exc:
            raise argparse.ArgumentTypeError(f"expected integers or 'inf', got {text!r}") from exc
    return out


def _check_budget(dataset, max_utts, cap: int, what: str) -> int:
    n = len(dataset) if max_utts is None else min(max_utts, len(dataset))
    frames = sum(len(dataset.features[i]) for i in range(n))
    if cap and frames > cap:
        raise CliError("budget_exceeded",
                       f"{what} would process {frames} frames, above the cap of {cap} "
                       "(raise --max-frames or lower --max-utts)", EXIT_BUDGET)
    return n


def _model_id(path) -> str:
    return Path(path).stem


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_data(a) -> list[Path]:
    try:
        spec = SyntheticTaskSpec(context_radius=a.radius, vocab_size=a.vocab, num_classes=a.classes,
                                 embed_noise_std=a.noise, seed=a.seed, task_kind=a.task,
                                 input_dim=a.input_dim, frame_rate_hz=a.frame_rate)
        ds = generate(spec, a.utts, a.min_len, a.max_len, a.split)
    except ValueError as exc:
        raise CliError("bad_config", str(exc), EXIT_BAD_INPUT) from exc
    save_matrix(ds, a.out)
    return [Path(a.out), Path(str(a.out) + ".json")]


def cmd_train(a) -> list[Path]:
    train = _load_dataset(a.data)
    dev = _load_dataset(a.dev) if a.dev else None
    try:
        mcfg = ModelConfig(num_layers=a.layers, model_dim=a.dim, num_heads=a.heads, ffn_dim=a.ffn,
                           input_dim=train.input_dim,
                           head="classifier" if train.label_kind == 0 else "regressor",
                           num_classes=train.num_classes if train.label_kind == 0 else 1,
                           positional_mode=a.positional_mode, seed=a.seed)
        tcfg = TrainConfig(optimizer=a.optimizer, lr=a.lr, schedule=a.schedule,
                           warmup_steps=a.warmup, batch_size=a.batch_size, epochs=a.epochs,
                           seed=a.seed, grad_clip=a.grad_clip)
        res = train_supervised(mcfg, train, tcfg, dev)
    except TrainingDiverged as exc:
        raise CliError("diverged", f"{exc} (epoch {exc.epoch})", EXIT_DIVERGED) from exc
    except ValueError as exc:
        raise CliError("bad_config", str(exc), EXIT_BAD_INPUT) from exc
    res.model.save(a.out)
    metrics = Path(str(a.out) + ".metrics.csv")
    cols = sorted({k for row in res.history for k in row} - {"epoch"})
    write_csv(metrics, ["epoch", *cols],
              ([row["epoch"], *[row.get(c, "") for c in cols]] for row in res.history))
    return [Path(a.out), metrics]


def cmd_probe(a) -> list[Path]:
    model = _load_model(a.model)
    train = _load_dataset(a.data)
    dev = _load_dataset(a.dev) if a.dev else None
    try:
        layer = resolve_layer(model, a.layer)
        cfg = DEFAULT_PROBE_CONFIG
        cfg = TrainConfig(**{**cfg.to_dict(), "seed": a.seed, "epochs": a.epochs, "l2": a.l2})
        probe = train_probe(model, layer, train, cfg, dev)
    except ValueError as exc:
        raise CliError("bad_config", str(exc), EXIT_BAD_INPUT) from exc
    probe.save(a.out)
    metrics = Path(str(a.out) + ".metrics.csv")
    rows = [("train", probe_error(model, probe, train))]
    if dev is not None:
        rows.append(("dev", probe_error(model, probe, dev)))
    write_csv(metrics, ("split", "probe_error"), rows)
    return [Path(a.out), metrics]


def cmd_measure_trunc(a) -> list[Path]:
    model = _load_model(a.model)
    ds = _load_dataset(a.data)
    probe = _load_probe(a.probe) if a.probe else None
    n = _check_budget(ds, a.max_utts, a.max_frames, "truncation sweep")
    ds = ds.subset(range(n))
    try:
        res = measure.truncation_sweep(model, ds, a.windows, a.distance, a.layer, probe,
                                       a.stride, a.exclude_edges, a.threads)
    except ValueError as exc:
        raise CliError("bad_config", str(exc), EXIT_BAD_INPUT) from exc
    mid = _model_id(a.model)
    fr = ds.frame_rate_hz
    write_csv(a.out, TRUNC_HEADER,
              ((mid, r.layer, r.half_window, (2 * r.half_window + 1) / fr, r.distance, r.value,
                r.frames, "" if r.full_error is None else r.full_error,
                "" if r.truncated_error is None else r.truncated_error) for r in res))
    outs = [Path(a.out)]
    if a.plot:
        fig = Path(a.out).with_suffix(".svg")
        ylabel = "mean l2 distance" if a.distance == "l2_per_frame" else "probe error increase"
        plotting.plot_truncation([r.half_window for r in res], [r.value for r in res], fig, fr, ylabel)
        outs.append(fig)
    return outs


def _report(a, models: list[str], layers) -> tuple[list, list, list]:
    ds = _load_dataset(a.data)
    n = _check_budget(ds, a.max_utts, a.max_frames, "influence measurement")
    curves, summaries, aux = [], [], []
    for path in models:
        model = _load_model(path)
        try:
            rep = measure.layerwise_report(model, ds, a.window, layers, a.stride, n,
                                           _model_id(path), a.variant, a.threads)
        except ValueError as exc:
            raise CliError("bad_config", str(exc), EXIT_BAD_INPUT) from exc
        curves.extend(rep.curve_rows())
        summaries.extend(rep.summary_rows())
        for s in rep.summaries:
            aux.append((s.model_id, s.layer, measure.asymmetry(rep.curves[s.layer]),
                        rep.curves[s.layer].empty_shifts))
    return curves, summaries, aux


def cmd_measure_influence(a) -> list[Path]:
    curves, summaries, _ = _report(a, [a.model], a.layer)
    write_csv(a.out, measure.CURVE_HEADER, curves)
    summary = Path(a.out).with_name(Path(a.out).stem + ".summary.csv")
    write_csv(summary, measure.SUMMARY_HEADER, summaries)
    outs = [Path(a.out), summary]
    if a.plot:
        fig = Path(a.out).with_suffix(".svg")
        plotting.plot_curves(curves, fig)
        outs.append(fig)
    return outs


def cmd_report_context(a) -> list[Path]:
    out = Path(a.out_dir)
    curves, summaries, aux = _report(a, a.model, None)
    write_csv(out / "curves.csv", measure.CURVE_HEADER, curves)
    write_csv(out / "summary.csv", measure.SUMMARY_HEADER, summaries)
    write_csv(out / "asymmetry.csv", ("model_id", "layer", "asymmetry", "empty_shifts"),
              ((m, l, v, " ".join(map(str, e))) for m, l, v, e in aux))
    plotting.plot_curves(curves, out / "curves.svg")
    plotting.plot_contextualization(summaries, out / "contextualization.svg")
    return [out / "summary.csv", out / "curves.csv", out / "asymmetry.csv",
            out / "curves.svg", out / "contextualization.svg"]


def cmd_stream_eval(a) -> list[Path]:
    model = _load_model(a.model)
    probe = _load_probe(a.probe)
    ds = _load_dataset(a.data)
    n = _check_budget(ds, a.max_utts, a.max_frames, "streaming sweep")
    ds = ds.subset(range(n))
    try:
        rows = streaming.sweep(model, probe, ds, a.histories, a.lookaheads, a.stride, a.threads)
    except ValueError as exc:
        raise CliError("bad_config", str(exc), EXIT_BAD_INPUT) from exc
    header = streaming.SWEEP_HEADER + (("approximate",) if a.stride > 1 else ())
    write_csv(a.out, header, (r + ((1,) if a.stride > 1 else ()) for r in rows))
    outs = [Path(a.out)]
    if a.plot:
        fig = Path(a.out).with_suffix(".svg")
        plotting.plot_streaming(rows, fig)
        outs.append(fig)
    return outs


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _common(p, budget=False):
    p.add_argument("--config", help="JSON file of option values (flags given explicitly win)")
    p.add_argument("--threads", type=int, default=1, help="worker threads for measurements")
    if budget:
        p.add_argument("--max-utts", type=int, default=None)
        p.add_argument("--max-frames", type=int, default=DEFAULT_MAX_FRAMES,
                       help="refuse to run above this many frames (0 disables the cap)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="effective-context", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a synthetic task split")
    _common(p)
    p.add_argument("--task", choices=TASK_KINDS, default="window_majority")
    p.add_argument("--radius", type=int, default=2)
    p.add_argument("--vocab", type=int, default=2)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--input-dim", type=int, default=16)
    p.add_argument("--frame-rate", type=float, default=50.0)
    p.add_argument("--utts", type=int, default=200)
    p.add_argument("--min-len", type=int, default=17)
    p.add_argument("--max-len", type=int, default=64)
    p.add_argument("--split", default="train")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train an encoder with a frame-level head")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--dev")
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--ffn", type=int, default=256)
    p.add_argument("--positional-mode", choices=POSITIONAL_MODES, default="restart")
    p.add_argument("--optimizer", choices=("adam", "sgd"), default="adam")
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--schedule", choices=("constant", "cosine"), default="cosine")
    p.add_argument("--warmup", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--grad-clip", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("probe", help="fit a linear probe on a frozen layer")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--dev")
    p.add_argument("--layer", type=int, default=-1)
    p.add_argument("--epochs", type=int, default=DEFAULT_PROBE_CONFIG.epochs)
    p.add_argument("--l2", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("measure-trunc", help="truncation distance for a sweep of half-windows")
    _common(p, budget=True)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--probe")
    p.add_argument("--windows", type=_int_list, default=[0, 1, 2, 4, 8, 16])
    p.add_argument("--distance", choices=measure.DISTANCES, default="l2_per_frame")
    p.add_argument("--layer", type=int, default=-1)
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--exclude-edges", action="store_true")
    p.add_argument("--plot", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_measure_trunc)

    for name, func, helptext in (
        ("measure-influence", cmd_measure_influence, "Jacobian relative-influence curves"),
        ("report-context", cmd_report_context, "per-layer curves, contextualization and figures"),
    ):
        p = sub.add_parser(name, help=helptext)
        _common(p, budget=True)
        p.add_argument("--data", required=True)
        p.add_argument("--window", type=int, default=50, help="half-window W in frames")
        p.add_argument("--stride", type=int, default=1, help="target-frame stride")
        p.add_argument("--variant", choices=measure.VARIANTS, default="sum")
        if name == "measure-influence":
            p.add_argument("--model", required=True)
            p.add_argument("--layer", type=_int_list, default=[-1])
            p.add_argument("--plot", action="store_true")
            p.add_argument("--out", required=True)
        else:
            p.add_argument("--model", required=True, action="append",
                           help="checkpoint path; repeat to compare models")
            p.add_argument("--out-dir", required=True)
        p.set_defaults(func=func)

    p = sub.add_parser("stream-eval", help="sliding-window streaming sweep with a frozen probe")
    _common(p, budget=True)
    p.add_argument("--model", required=True)
    p.add_argument("--probe", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--histories", type=_opt_int_list, default=[None])
    p.add_argument("--lookaheads", type=_opt_int_list, default=[None, 0, 1, 2, 4, 8])
    p.add_argument("--stride", type=int, default=1)
    p.add_argument("--plot", action="store_true")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_stream_eval)

    p = sub.add_parser("rerun", help="replay the command recorded in a manifest")
    p.add_argument("manifest")
    p.set_defaults(func=None)
    return parser


# ---------------------------------------------------------------------------
# config files and manifests
# ---------------------------------------------------------------------------

def _config_arg(argv: list[str]) -> str | None:
    for i, tok in enumerate(argv):
        if tok == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if tok.startswith("--config="):
            return tok.split("=", 1)[1]
    return None


def _apply_config(parser, argv: list[str]) -> argparse.Namespace:
    """Parse ``argv``, filling options from ``--config`` where not given as flags."""
    cfg_path = _config_arg(argv)
    choices = parser._subparsers._group_actions[0].choices
    if cfg_path is None or not argv or argv[0] not in choices:
        return parser.parse_args(argv)
    path = _need(cfg_path)
    try:
        cfg = read_json(path)
    except json.JSONDecodeError as exc:
        raise CliError("bad_config", f"{path}: {exc}", EXIT_BAD_INPUT) from exc
    if not isinstance(cfg, dict):
        raise CliError("bad_config", f"{path}: expected a JSON object", EXIT_BAD_INPUT)
    known = {a.dest: a for a in choices[argv[0]]._actions}
    flags = []
    for key, value in cfg.items():
        dest = key.replace("-", "_")
        if dest not in known or dest in ("config", "help"):
            raise CliError("bad_config", f"{path}: unknown option {key!r}", EXIT_BAD_INPUT)
        action = known[dest]
        opt = action.option_strings[0]
        if isinstance(action, argparse._StoreTrueAction):
            if value:
                flags.append(opt)
        elif isinstance(value, list) and isinstance(action, argparse._AppendAction):
            for v in value:
                flags += [opt, str(v)]
        else:
            if isinstance(value, list):
                value = ",".join("inf" if v is None else str(v) for v in value)
            flags += [opt, "inf" if value is None else str(value)]
    # config values first, explicit flags afterwards so they take precedence
    return parser.parse_args([argv[0], *flags, *argv[1:]])


def _canonical(args: argparse.Namespace) -> dict:
    d = {k: v for k, v in vars(args).items() if k not in ("func", "config")}
    return json.loads(json.dumps(d, sort_keys=True, default=str))


def _manifest_path(output: Path) -> Path:
    return output.with_name(output.name + ".manifest.json")


def _input_paths(args) -> list[str]:
    keys = ("data", "dev", "model", "probe")
    out = []
    for k in keys:
        v = getattr(args, k, None)
        for p in (v if isinstance(v, list) else [v]):
            if p:
                out.append(str(p))
    return out


def _run(args: argparse.Namespace) -> tuple[list[Path], dict]:
    inputs = {p: _sha256(_need(p)) for p in _input_paths(args)}
    t0 = time.perf_counter()
    outputs = args.func(args)
    options = _canonical(args)
    manifest = {
        "command": args.command,
        "options": options,
        "config_hash": hashlib.sha256(json.dumps(options, sort_keys=True).encode()).hexdigest(),
        "seeds": {k: v for k, v in options.items() if k == "seed"},
        "inputs": inputs,
        "outputs": {str(p): _sha256(p) for p in outputs},
        "tool_version": __version__,
        "wall_time_s": round(time.perf_counter() - t0, 3),
    }
    write_json(_manifest_path(outputs[0]), manifest)
    return outputs, manifest


def rerun(manifest_path) -> tuple[list[Path], dict]:
    """Re-execute a recorded command; inputs must be unchanged."""
    path = _need(manifest_path)
    try:
        man = read_json(path)
        command, options = man["command"], dict(man["options"])
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CliError("bad_config", f"{path}: not a run manifest ({exc})", EXIT_BAD_INPUT) from exc
    for p, digest in man.get("inputs", {}).items():
        if _sha256(_need(p)) != digest:
            raise CliError("input_changed", f"{p} differs from the recorded input", EXIT_BAD_INPUT)
    parser = build_parser()
    args = parser.parse_args([command, *_required_stub(parser, command, options)])
    for k, v in options.items():
        setattr(args, k, v)
    outputs, new = _run(args)
    changed = sorted(p for p, h in man.get("outputs", {}).items() if new["outputs"].get(p) != h)
    if changed:
        raise CliError("not_reproduced", f"outputs differ from the manifest: {changed}",
                       EXIT_NOT_REPRODUCED)
    return outputs, new


def _required_stub(parser, command, options) -> list[str]:
    # argparse wants required flags on the command line; their real values are
    # overwritten from the manifest right after parsing
    sp = parser._subparsers._group_actions[0].choices[command]
    stub = []
    for act in sp._actions:
        if act.required and act.option_strings:
            stub += [act.option_strings[0], "_"]
    return stub


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        parser = build_parser()
        if argv and argv[0] == "rerun":
            args = parser.parse_args(argv)
            outputs, _ = rerun(args.manifest)
        else:
            args = _apply_config(parser, argv)
            outputs, _ = _run(args)
    except CliError as exc:
        _report_error(exc.kind, str(exc), exc.code)
        return exc.code
    except SystemExit as exc:  # --help / --version
        return int(exc.code or 0)
    except Exception as exc:  # noqa: BLE001 - every failure becomes a JSON record
        _report_error(type(exc).__name__, str(exc), EXIT_FAILURE)
        return EXIT_FAILURE
    for p in outputs:
        print(p)
    return EXIT_OK


def _report_error(kind: str, message: str, code: int) -> None:
    sys.stderr.write(json.dumps({"error": kind, "message": message, "exit_code": code}) + "\n")


if __name__ == "__main__":
    sys.exit(main())
