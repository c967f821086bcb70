"""Command-line front end: ``synth``, ``train``, ``encode``, ``decode`` and ``eval``.

Every command prints a human-readable table on stdout. ``--report PATH``
additionally writes one JSON object per line (frames, then a summary);
``--jsonl`` prints those lines on stdout in place of the table. The exit
status is the ``exit_code`` of the first error met (0 on success).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__
from .codec import Bitstream, concat_windows, decode_frame, encode_frame, measure_bpp, stack_windows
from .config import ABLATION_GROUPS, ModelConfig, preset
from .data import (
    DISTANCE_ONLY, SyntheticSpec, read_frame, read_manifest, write_frame, write_synthetic_corpus,
)
from .errors import CodecError, ConfigurationError, IntegrityError, ValidationError
from .geom import PointCloudFrame, SensorConfig, serialize
from .ssm import load, new_model, save
from .ssm.train import TrainConfig, fit, mean_bits

log = logging.getLogger("lidarcodec")

BITSTREAM_SUFFIX = ".lrc"


# ---------------------------------------------------------------- reports

@dataclass
class FrameReport:
    name: str
    n: int = 0
    container_bpp: float | None = None
    payload_bpp: float | None = None
    nll_bits: float | None = None
    overhead_bits: float | None = None
    t_serialize: float = 0.0
    t_model: float = 0.0
    t_coder: float = 0.0
    error: str | None = None
    exit_code: int = 0


@dataclass
class RunReport:
    command: str
    seed: int | None = None
    workers: int = 1
    window: int | None = None
    frames: list = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def ok_frames(self):
        return [f for f in self.frames if f.error is None and f.n > 0]

    def summary(self) -> dict:
        ok = self.ok_frames()
        n = sum(f.n for f in ok)
        out = {
            "kind": "summary", "command": self.command, "seed": self.seed,
            "workers": self.workers, "window": self.window,
            "frames": len(self.frames), "failed": sum(f.error is not None for f in self.frames),
            "points": n,
        }
        if n:
            # pooled over points, not averaged over frames
            out["container_bpp"] = sum(f.container_bpp * f.n for f in ok) / n
            out["payload_bpp"] = sum(f.payload_bpp * f.n for f in ok) / n
            if all(f.nll_bits is not None for f in ok):
                out["nll_bits"] = sum(f.nll_bits for f in ok)
                out["overhead_bits"] = sum(f.overhead_bits for f in ok)
        for k in ("t_serialize", "t_model", "t_coder"):
            out[k] = sum(getattr(f, k) for f in self.frames)
        out.update(self.extra)
        return out

    def records(self):
        for f in self.frames:
            yield {"kind": "frame", "command": self.command, "seed": self.seed, **asdict(f)}
        yield self.summary()

    def exit_code(self) -> int:
        return next((f.exit_code for f in self.frames if f.exit_code), 0)


def _fmt(x, spec=".4f"):
    return "-" if x is None else format(x, spec)


def format_table(report: RunReport) -> str:
    head = f"{'frame':<28} {'points':>8} {'bpp':>8} {'payload':>8} {'nll bits':>12} " \
           f"{'overhead':>9} {'model s':>8} {'coder s':>8}"
    lines = [head, "-" * len(head)]
    for f in report.frames:
        if f.error:
            lines.append(f"{f.name:<28} ERROR {f.error}")
            continue
        lines.append(
            f"{f.name:<28} {f.n:>8d} {_fmt(f.container_bpp):>8} {_fmt(f.payload_bpp):>8} "
            f"{_fmt(f.nll_bits, '.1f'):>12} {_fmt(f.overhead_bits, '.1f'):>9} "
            f"{f.t_model:>8.3f} {f.t_coder:>8.3f}"
        )
    s = report.summary()
    lines.append("-" * len(head))
    lines.append(
        f"{'total':<28} {s['points']:>8d} {_fmt(s.get('container_bpp')):>8} "
        f"{_fmt(s.get('payload_bpp')):>8} {_fmt(s.get('nll_bits'), '.1f'):>12} "
        f"{_fmt(s.get('overhead_bits'), '.1f'):>9} {s['t_model']:>8.3f} {s['t_coder']:>8.3f}"
    )
    lines.append(f"workers={report.workers} window={report.window} seed={report.seed} "
                 f"serialize={s['t_serialize']:.3f}s")
    return "\n".join(lines)


def emit(report: RunReport, args, table=None):
    records = list(report.records())
    if getattr(args, "report", None):
        with open(args.report, "w") as fh:
            for r in records:
                fh.write(json.dumps(r, default=_json_default) + "\n")
    if getattr(args, "jsonl", False):
        for r in records:
            print(json.dumps(r, default=_json_default))
    else:
        print(table if table is not None else format_table(report))


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (set, frozenset)):
        return sorted(o)
    raise TypeError(type(o).__name__)


# ---------------------------------------------------------------- shared helpers

def parse_ablate(text) -> frozenset:
    if not text:
        return frozenset()
    groups = [g.strip() for g in text.split(",") if g.strip()]
    bad = [g for g in groups if g not in ABLATION_GROUPS]
    if bad:
        raise ValidationError(f"unknown ablation group(s) {bad}; choose from {sorted(ABLATION_GROUPS)}")
    return frozenset(c for g in groups for c in ABLATION_GROUPS[g])


def load_config_file(path) -> dict:
    if not path:
        return {}
    try:
        doc = json.loads(Path(path).read_text())
    except (OSError, ValueError) as exc:
        raise ConfigurationError(f"{path}: unreadable config ({exc})") from exc
    if not isinstance(doc, dict) or set(doc) - {"model", "train", "synth"}:
        raise ConfigurationError(f"{path}: expected an object with 'model', 'train' and/or 'synth'")
    return doc


def model_config(args, sensor: SensorConfig, conf: dict) -> ModelConfig:
    overrides = dict(conf.get("model", {}))
    overrides["A"] = sensor.A
    if getattr(args, "model_window", None):
        overrides["window"] = args.model_window
    try:
        return preset(args.preset, **overrides)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"bad model config: {exc}") from exc


def train_config(args, conf: dict) -> TrainConfig:
    d = asdict(TrainConfig())
    d.update(conf.get("train", {}))
    for k in ("epochs", "batch_size", "lr_max", "lr_min"):
        if getattr(args, k, None) is not None:
            d[k] = getattr(args, k)
    if args.seed is not None:
        d["seed"] = args.seed
    try:
        return TrainConfig(**d)
    except TypeError as exc:
        raise ConfigurationError(f"bad train config: {exc}") from exc


def collect_frames(inputs, fmt):
    """``[(name, path, format, sensor or None)]`` from manifests and frame files."""
    out = []
    for item in inputs:
        p = Path(item)
        if p.suffix == ".json":
            paths, sensor, mfmt, _ = read_manifest(p)
            out.extend((q.stem, q, fmt or mfmt, sensor) for q in paths)
        else:
            out.append((p.stem, p, fmt, None))
    return out


def training_windows(frames, sensor, window):
    return concat_windows([stack_windows(serialize(f, sensor), window, sensor) for f in frames])


def _frame_report(name, frame, bs: Bitstream) -> FrameReport:
    st = bs.stats
    rep = FrameReport(name, n=frame.n, t_serialize=st.t_serialize, t_model=st.t_model,
                      t_coder=st.t_coder)
    if frame.n:
        rep.container_bpp, rep.payload_bpp = measure_bpp(bs)
        rep.nll_bits = st.nll_bits
        rep.overhead_bits = st.payload_bits - st.nll_bits
    return rep


def _fail(name, exc: CodecError) -> FrameReport:
    log.error("%s: %s", name, exc)
    return FrameReport(name, error=f"{type(exc).__name__}: {exc}", exit_code=exc.exit_code)


# ---------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    conf = load_config_file(args.config)
    base = DISTANCE_ONLY if args.profile == "distance" else SyntheticSpec()
    fields = dict(conf.get("synth", {}))
    fields.update(frames=args.frames, seed=args.seed or 0, profile=args.profile)
    spec = replace(base, **fields)
    manifest = write_synthetic_corpus(args.output, spec, args.format or "ascii")
    print(f"wrote {spec.frames} frames ({spec.profile} profile, seed {spec.seed}) -> {manifest}")
    return 0


def cmd_train(args) -> int:
    conf = load_config_file(args.config)
    paths, sensor, fmt, _ = read_manifest(args.manifest)
    frames = [read_frame(p, args.format or fmt, sensor.A) for p in paths]
    mcfg = model_config(args, sensor, conf)
    mask = parse_ablate(args.ablate)
    if mask:
        mcfg = mcfg.without(mask)
    tcfg = train_config(args, conf)
    model = new_model(mcfg, sensor, seed=tcfg.seed)
    windows = training_windows(frames, sensor, mcfg.window)
    records = []

    def progress(epoch, bits):
        rec = {"kind": "epoch", "epoch": epoch, "bits_per_symbol": bits}
        records.append(rec)
        if args.jsonl:
            print(json.dumps(rec))
        else:
            print(f"epoch {epoch:3d}  {bits:.4f} bits/symbol", flush=True)

    tlog = fit(model, windows, tcfg, progress=progress)
    save(model, args.output)
    summary = {
        "kind": "summary", "command": "train", "seed": tcfg.seed, "checkpoint": str(args.output),
        "digest": model.digest.hex(), "model": mcfg.to_dict(), "train": asdict(tcfg),
        "windows": int(len(windows["sym"])), "steps": tlog.steps, "seconds": tlog.seconds,
        "final_bits_per_symbol": tlog.epoch_bits[-1] if tlog.epoch_bits else None,
    }
    if args.report:
        with open(args.report, "w") as fh:
            for r in records + [summary]:
                fh.write(json.dumps(r) + "\n")
    if args.jsonl:
        print(json.dumps(summary))
    else:
        print(f"checkpoint {args.output} digest {summary['digest'][:16]} "
              f"({tlog.steps} steps, {tlog.seconds:.1f}s)")
    return 0


def _load_model(path):
    return load(path)


def cmd_encode(args) -> int:
    model = _load_model(args.checkpoint)
    sensor = model.sensor
    mask = parse_ablate(args.ablate)
    out_dir = Path(args.output)
    out_dir.mkdir(parents=True, exist_ok=True)
    window = args.window or model.config.window
    report = RunReport("encode", seed=args.seed, workers=args.workers, window=window)
    for name, path, fmt, msensor in collect_frames(args.inputs, args.format):
        try:
            if msensor is not None and msensor != sensor:
                raise ConfigurationError(f"manifest sensor {msensor} does not match checkpoint {sensor}")
            frame = read_frame(path, fmt, sensor.A)
            bs = encode_frame(frame, sensor, model, window=window, workers=args.workers, mask=mask)
            (out_dir / f"{name}{BITSTREAM_SUFFIX}").write_bytes(bs.to_bytes())
            report.frames.append(_frame_report(name, frame, bs))
        except (CodecError, OSError) as exc:
            report.frames.append(_fail(name, _as_codec_error(exc)))
    emit(report, args)
    return report.exit_code()


def _as_codec_error(exc):
    if isinstance(exc, CodecError):
        return exc
    return IntegrityError(str(exc))


def _find_geometry(geometry_dir: Path, stem: str, fmt):
    exts = {"bin": (".bin",), "ascii": (".txt",)}.get(fmt, (".txt", ".bin"))
    for ext in exts:
        p = geometry_dir / f"{stem}{ext}"
        if p.exists():
            return p
    raise IntegrityError(f"no geometry file for {stem} in {geometry_dir}")


def cmd_decode(args) -> int:
    model = _load_model(args.checkpoint)
    sensor = model.sensor
    out_dir = Path(args.output)
    out_dir.mkdir(parents=True, exist_ok=True)
    geo = Path(args.geometry)
    report = RunReport("decode", seed=args.seed, workers=args.workers)
    streams = []
    for item in args.inputs:
        p = Path(item)
        streams.extend(sorted(p.glob(f"*{BITSTREAM_SUFFIX}")) if p.is_dir() else [p])
    for path in streams:
        name = path.stem
        try:
            bs = Bitstream.from_bytes(path.read_bytes())
            gpath = _find_geometry(geo, name, args.format)
            geom = read_frame(gpath, args.format, sensor.A)
            t0 = time.perf_counter()
            sym = decode_frame(bs, geom.positions, model, workers=args.workers)
            elapsed = time.perf_counter() - t0
            out_fmt = args.format or ("bin" if gpath.suffix == ".bin" else "ascii")
            ext = ".bin" if out_fmt == "bin" else ".txt"
            write_frame(out_dir / f"{name}{ext}", PointCloudFrame(geom.positions, sym), out_fmt, sensor.A)
            rep = FrameReport(name, n=bs.n, t_model=elapsed)
            if bs.n:
                rep.container_bpp, rep.payload_bpp = measure_bpp(bs)
            report.window = bs.window
            report.frames.append(rep)
        except (CodecError, OSError) as exc:
            report.frames.append(_fail(name, _as_codec_error(exc)))
    emit(report, args)
    return report.exit_code()


def _eval_pass(label, frames, names, sensor, model, window, workers, mask):
    rep = RunReport("eval", workers=workers, window=window, extra={"context": label})
    for name, frame in zip(names, frames):
        bs = encode_frame(frame, sensor, model, window=window, workers=workers, mask=mask)
        rep.frames.append(_frame_report(name, frame, bs))
    return rep


def cmd_eval(args) -> int:
    """Code a corpus with the full context and with each requested ablation."""
    conf = load_config_file(args.config)
    model = _load_model(args.checkpoint)
    sensor = model.sensor
    items = collect_frames(args.inputs, args.format)
    names = [n for n, *_ in items]
    frames = [read_frame(p, f, sensor.A) for _, p, f, _ in items]
    window = args.window or model.config.window
    groups = [g.strip() for g in (args.ablate or "").split(",") if g.strip()]
    parse_ablate(",".join(groups))
    passes = [("full", "none", model, frozenset())]
    for g in groups:
        comps = frozenset(ABLATION_GROUPS[g])
        if args.retrain:
            train_paths, tsensor, tfmt, _ = read_manifest(args.train_manifest or args.inputs[0])
            if tsensor != sensor:
                raise ConfigurationError("training manifest sensor differs from the checkpoint")
            tframes = [read_frame(p, tfmt, sensor.A) for p in train_paths]
            tcfg = train_config(args, conf)
            cfg = model.config.without(comps)
            m = new_model(cfg, sensor, seed=tcfg.seed)
            fit(m, training_windows(tframes, sensor, cfg.window), tcfg)
            passes.append((f"-{g}", "retrain", m, frozenset()))
        else:
            passes.append((f"-{g}", "mask", model, comps))
    reports = []
    for label, mode, m, mask in passes:
        rep = _eval_pass(label, frames, names, sensor, m, window, args.workers, mask)
        rep.seed = args.seed
        rep.extra["mode"] = mode
        reports.append(rep)
    base = reports[0].summary().get("payload_bpp")
    rows = []
    for rep in reports:
        s = rep.summary()
        if base is not None and s.get("payload_bpp") is not None:
            s["delta_payload_bpp"] = s["payload_bpp"] - base
            s["relative_change"] = s["delta_payload_bpp"] / base if base else None
        rep.extra.update({k: s[k] for k in ("delta_payload_bpp", "relative_change") if k in s})
        rows.append(s)
    records = [r for rep in reports for r in rep.records()]
    if args.report:
        with open(args.report, "w") as fh:
            for r in records:
                fh.write(json.dumps(r, default=_json_default) + "\n")
    if args.jsonl:
        for r in records:
            print(json.dumps(r, default=_json_default))
    else:
        head = f"{'context':<10} {'mode':<8} {'bpp':>8} {'payload':>8} {'delta':>9} {'change':>8}"
        print(head)
        print("-" * len(head))
        for s in rows:
            print(f"{s['context']:<10} {s['mode']:<8} {_fmt(s.get('container_bpp')):>8} "
                  f"{_fmt(s.get('payload_bpp')):>8} {_fmt(s.get('delta_payload_bpp'), '+.4f'):>9} "
                  f"{_fmt(s.get('relative_change'), '+.2%'):>8}")
    return 0


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="lidarcodec", description="Learned lossless LiDAR reflectance coding.")
    ap.add_argument("--version", action="version", version=__version__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, workers=True):
        p.add_argument("--config", help="JSON file with 'model', 'train' and/or 'synth' sections")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--format", choices=("bin", "ascii"), default=None)
        p.add_argument("--report", help="write JSON lines to this file")
        p.add_argument("--jsonl", action="store_true", help="print JSON lines instead of a table")
        if workers:
            p.add_argument("--workers", type=int, default=1)

    def training(p):
        p.add_argument("--preset", choices=("standard", "light"), default="standard")
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--lr-max", type=float)
        p.add_argument("--lr-min", type=float)

    p = sub.add_parser("synth", help="write a synthetic corpus with a manifest")
    common(p, workers=False)
    p.add_argument("output")
    p.add_argument("--profile", choices=("default", "distance"), default="default")
    p.add_argument("--frames", type=int, default=8)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model on a corpus manifest")
    common(p, workers=False)
    training(p)
    p.add_argument("manifest")
    p.add_argument("-o", "--output", required=True, help="checkpoint path")
    p.add_argument("--window", dest="model_window", type=int, help="training window length")
    p.add_argument("--ablate", help="train without these context groups (rho,pos,prev)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("encode", help="compress reflectance of frames")
    common(p)
    p.add_argument("inputs", nargs="+", help="frame files or manifests")
    p.add_argument("-c", "--checkpoint", required=True)
    p.add_argument("-o", "--output", required=True, help="bitstream directory")
    p.add_argument("--window", type=int)
    p.add_argument("--ablate", help="mask these context groups (rho,pos,prev)")
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="recover reflectance from bitstreams and geometry")
    common(p)
    p.add_argument("inputs", nargs="+", help="bitstream files or directories")
    p.add_argument("-g", "--geometry", required=True, help="directory of geometry frames")
    p.add_argument("-c", "--checkpoint", required=True)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("eval", help="compare bpp with and without context groups")
    common(p)
    training(p)
    p.add_argument("inputs", nargs="+", help="frame files or manifests")
    p.add_argument("-c", "--checkpoint", required=True)
    p.add_argument("--window", type=int)
    p.add_argument("--ablate", help="comma-separated groups: rho,pos,prev")
    p.add_argument("--retrain", action="store_true", help="retrain per ablation instead of masking")
    p.add_argument("--train-manifest", help="corpus used with --retrain (default: first input)")
    p.set_defaults(func=cmd_eval)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "workers", 1) < 1:
        print("error: --workers must be >= 1", file=sys.stderr)
        return ValidationError.exit_code
    try:
        return args.func(args)
    except CodecError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return IntegrityError.exit_code


if __name__ == "__main__":
    sys.exit(main())
