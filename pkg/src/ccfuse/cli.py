"""``ccfuse`` command line.

Subcommands: ``fuse``, ``evaluate``, ``trace-stats``, ``ablate`` and
``synth``. Failures print a single JSON object
``{"error": ..., "message": ..., "context": ...}`` on stderr and exit with

* 2 for configuration, usage and file errors,
* 3 for image shape/size errors,
* 4 for malformed trace files,
* 1 for anything else raised by the library.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from pathlib import Path

import numpy as np

from .config import load_config
from .errors import CCFError, ConfigError, DimensionError, FormatError, IoError, ParamError, ShapeMismatch, TraceFormatError
from .gate import SelectionTrace
from .image import ImageGrid, load_image, save_image
from .metrics import METRIC_KEYS, metric_pair_suite
from .runner import run_config
from .synthetic import PAIR_KINDS, make_pair

ABLATION_VARIANTS = (
    ("ddpm_only", 0.0, "none"),
    ("basic", None, "none"),
    ("basic+enhanced", None, "all"),
    ("full", None, "scs"),
)


class UsageError(CCFError, ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _exit_code(exc) -> int:
    if isinstance(exc, (IoError, ConfigError, FormatError, UsageError)):
        return 2
    if isinstance(exc, (ShapeMismatch, DimensionError)):
        return 3
    if isinstance(exc, TraceFormatError):
        return 4
    return 1


def _emit_error(exc, context) -> int:
    payload = {"error": type(exc).__name__, "message": str(exc), "context": context}
    sys.stderr.write(json.dumps(payload) + "\n")
    return _exit_code(exc)


def _write_text(path: Path, text: str):
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text, encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc.strerror or exc}") from exc


def _save(img: ImageGrid, path: Path):
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise IoError(f"cannot create {path.parent}: {exc.strerror or exc}") from exc
    save_image(img, path)


def _loss_summary(result):
    fl = result.final_losses
    basic = fl["basic_combined"]["total"]
    enhanced = float(sum(fl["enhanced"].values()))
    task = float(sum(fl["task_specific"].values()))
    return basic, enhanced, basic + enhanced + task


# --------------------------------------------------------------------------
# fuse
# --------------------------------------------------------------------------


def cmd_fuse(args) -> int:
    cfg = load_config(args.config)
    out = run_config(cfg)
    paths = {k: cfg.resolve(getattr(cfg.output, k)) for k in ("fused", "trace", "metrics")}
    _save(out.fused, paths["fused"])
    _write_text(paths["trace"], out.result.trace.to_csv())
    basic, enhanced, combined = _loss_summary(out.result)
    _write_text(
        paths["metrics"],
        out.report.to_json(
            task=cfg.task,
            seed=cfg.seed,
            basic_loss=basic,
            combined_loss=combined,
            final_losses=out.result.final_losses,
        ),
    )
    print(json.dumps({k: str(v) for k, v in paths.items()}))
    return 0


# --------------------------------------------------------------------------
# evaluate
# --------------------------------------------------------------------------


def cmd_evaluate(args) -> int:
    if len(args.source) != 2:
        raise UsageError("evaluate needs exactly two -s/--source images")
    fused = np.asarray(load_image(args.fused))
    a, b = (np.asarray(load_image(p)) for p in args.source)
    for name, img in zip(args.source, (a, b)):
        if img.shape != fused.shape:
            raise ShapeMismatch(f"{name} has shape {img.shape}, fused image {fused.shape}")
    text = metric_pair_suite(fused, a, b).to_json()
    if args.output:
        _write_text(Path(args.output), text)
    sys.stdout.write(text)
    return 0


# --------------------------------------------------------------------------
# trace-stats
# --------------------------------------------------------------------------


def phase_counts(trace: SelectionTrace, phases: int):
    """Selection counts per condition in each of ``phases`` equal spans of the run.

    Record ``s`` (0-based, in sampling order) of a ``T``-step trace falls
    in phase ``floor(s * phases / T)``.
    """
    T = len(trace)
    if T == 0:
        raise TraceFormatError("trace has no records")
    if not 1 <= phases <= T:
        raise ParamError(f"phases must lie in [1, {T}], got {phases}")
    counts = np.zeros((phases, len(trace.condition_ids)), dtype=np.int64)
    for s, rec in enumerate(trace.records):
        counts[s * phases // T, list(rec.selected)] += 1
    return counts


def trace_stats(trace: SelectionTrace, phases: int) -> dict:
    counts = phase_counts(trace, phases)
    T = len(trace)
    ids = trace.condition_ids
    per_phase = []
    for p in range(phases):
        first = next(s for s in range(T) if s * phases // T == p)
        last = max(s for s in range(T) if s * phases // T == p)
        per_phase.append(
            {
                "phase": p,
                "steps": [first, last],
                "counts": {cid: int(n) for cid, n in zip(ids, counts[p])},
                "total": int(counts[p].sum()),
            }
        )
    glob = counts.sum(axis=0)
    return {
        "T": T,
        "phases": phases,
        "condition_ids": list(ids),
        "per_phase": per_phase,
        "global": {cid: int(n) for cid, n in zip(ids, glob)},
        "total": int(glob.sum()),
    }


_PALETTE = ("#4477aa", "#ee6677", "#228833", "#ccbb44", "#66ccee", "#aa3377", "#bbbbbb", "#222255")


def selection_svg(stats: dict) -> str:
    """Grouped bar chart: one group per condition, one bar per phase."""
    ids = stats["condition_ids"]
    phases = stats["per_phase"]
    width, height, pad = 80 + 60 * max(len(ids), 1), 260, 40
    top = max([1] + [max(p["counts"].values(), default=0) for p in phases])
    bar = 48.0 / max(len(phases), 1)
    plot_h = height - 2 * pad
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<line x1="{pad}" y1="{height - pad}" x2="{width - 10}" y2="{height - pad}" stroke="black"/>',
        f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
        f'<text x="{pad - 4}" y="{pad + 4}" font-size="10" text-anchor="end">{top}</text>',
        f'<text x="{pad - 4}" y="{height - pad}" font-size="10" text-anchor="end">0</text>',
    ]
    for j, cid in enumerate(ids):
        x0 = pad + 10 + 60 * j
        for p_i, p in enumerate(phases):
            h = plot_h * p["counts"][cid] / top
            parts.append(
                f'<rect x="{x0 + p_i * bar:.2f}" y="{height - pad - h:.2f}" width="{bar:.2f}" height="{h:.2f}" '
                f'fill="{_PALETTE[p_i % len(_PALETTE)]}"><title>{cid} phase {p["phase"]}: {p["counts"][cid]}</title></rect>'
            )
        parts.append(f'<text x="{x0 + 24}" y="{height - pad + 14}" font-size="10" text-anchor="middle">{cid}</text>')
    for p_i, p in enumerate(phases):
        parts.append(
            f'<rect x="{pad + 10 + 70 * p_i}" y="8" width="10" height="10" fill="{_PALETTE[p_i % len(_PALETTE)]}"/>'
            f'<text x="{pad + 24 + 70 * p_i}" y="17" font-size="10">phase {p["phase"]}</text>'
        )
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_trace_stats(args) -> int:
    path = Path(args.trace)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc.strerror or exc}") from exc
    stats = trace_stats(SelectionTrace.from_csv(text), args.phases)
    out = json.dumps(stats, indent=2) + "\n"
    if args.output:
        _write_text(Path(args.output), out)
    if args.plot:
        _write_text(Path(args.plot), selection_svg(stats))
    sys.stdout.write(out)
    return 0


# --------------------------------------------------------------------------
# ablate
# --------------------------------------------------------------------------


def _fmt(v):
    return repr(float(v)) if not (isinstance(v, float) and math.isinf(v)) else ("inf" if v > 0 else "-inf")


def cmd_ablate(args) -> int:
    cfg = load_config(args.config)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["variant", *METRIC_KEYS, "basic_loss", "enhanced_loss", "combined_loss"])
    for label, lam, selection in ABLATION_VARIANTS:
        out = run_config(cfg, guidance_scale=lam, selection=selection)
        if args.out_dir:
            _save(out.fused, Path(args.out_dir) / f"{label}{Path(cfg.output.fused).suffix or '.png'}")
        basic, enhanced, combined = _loss_summary(out.result)
        writer.writerow([label, *(_fmt(out.report[k]) for k in METRIC_KEYS), _fmt(basic), _fmt(enhanced), _fmt(combined)])
    text = buf.getvalue()
    if args.output:
        _write_text(Path(args.output), text)
    sys.stdout.write(text)
    return 0


# --------------------------------------------------------------------------
# synth
# --------------------------------------------------------------------------

_SYNTH_TASK = {"complementary": "vif", "blur": "mff", "exposure": "mef"}


def cmd_synth(args) -> int:
    """Write a synthetic source pair and a ready-to-run config next to it."""
    out = Path(args.out_dir)
    a, b = make_pair(args.kind, args.size)
    names = ("a.png", "b.png")
    for name, img in zip(names, (a, b)):
        _save(ImageGrid(img), out / name)
    lines = [
        f'task = "{_SYNTH_TASK[args.kind]}"',
        f"seed = {args.seed}",
        "",
        "[sources]",
        f'paths = ["{names[0]}", "{names[1]}"]',
        "",
        "[output]",
        'fused = "fused.png"',
        'trace = "trace.csv"',
        'metrics = "metrics.json"',
        "",
    ]
    _write_text(out / "config.toml", "\n".join(lines))
    print(json.dumps({"sources": [str(out / n) for n in names], "config": str(out / "config.toml")}))
    return 0


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ccfuse", description="Guided-diffusion image fusion with adaptive condition selection.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.required = True

    f = sub.add_parser("fuse", help="run a fusion from a TOML config")
    f.add_argument("-c", "--config", required=True)
    f.set_defaults(func=cmd_fuse)

    e = sub.add_parser("evaluate", help="metric report for a fused image against two sources")
    e.add_argument("-f", "--fused", required=True)
    e.add_argument("-s", "--source", action="append", default=[], required=True)
    e.add_argument("-o", "--output")
    e.set_defaults(func=cmd_evaluate)

    t = sub.add_parser("trace-stats", help="per-phase selection counts of a trace CSV")
    t.add_argument("-t", "--trace", required=True)
    t.add_argument("--phases", type=int, default=1)
    t.add_argument("--plot", help="write an SVG bar chart here")
    t.add_argument("-o", "--output")
    t.set_defaults(func=cmd_trace_stats)

    a = sub.add_parser("ablate", help="compare no guidance / basic / basic+enhanced / full selection")
    a.add_argument("-c", "--config", required=True)
    a.add_argument("-o", "--output", help="CSV path (also printed)")
    a.add_argument("--out-dir", help="save each variant's fused image here")
    a.set_defaults(func=cmd_ablate)

    s = sub.add_parser("synth", help="write a synthetic source pair and config")
    s.add_argument("--kind", choices=sorted(PAIR_KINDS), default="complementary")
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        return _emit_error(exc, {"argv": list(argv)})
    try:
        return args.func(args)
    except CCFError as exc:
        return _emit_error(exc, {"command": args.command, "argv": list(argv)})


if __name__ == "__main__":
    sys.exit(main())
