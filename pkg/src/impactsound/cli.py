"""Command-line entry point: ``impactsound <subcommand> ...``.

Every flag can also be given in a JSON ``--config`` file under its option
name with underscores (``n_band``, ``hidden_size``, ...). Flags given on the
command line win over the file. Logs go to standard error; JSON and CSV
results go to standard output unless ``--out`` is given.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import cochlea, evalkit, onset, synthesis, synthdata
from .signal_io import (FormatError, Waveform, read_cochleagram, read_features, read_manifest,
                        read_waveform, write_cochleagram, write_waveform)

log = logging.getLogger("impactsound")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


class _HelpFormatter(argparse.HelpFormatter):
    """Append the default to every optional argument's help line."""

    def _get_help_string(self, action):
        text = action.help or ""
        if action.option_strings and action.default is not argparse.SUPPRESS \
                and action.nargs != 0 and "%(default)" not in text:
            text += " (default: %(default)s)"
        return text


def _default_seed() -> int:
    raw = os.environ.get("IMPACT_SEED", "0")
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"IMPACT_SEED must be an integer, got {raw!r}") from None


# ------------------------------------------------------------------ parser

def _common(p, seed_default):
    g = p.add_argument_group("run")
    g.add_argument("--config", type=Path, help="JSON file of option values (flags override it)")
    g.add_argument("--seed", type=int, default=seed_default,
                   help="random seed, env IMPACT_SEED")
    g.add_argument("--threads", type=int, default=1, help="worker threads")
    g.add_argument("--log-level", default="WARNING",
                   choices=["DEBUG", "INFO", "WARNING", "ERROR"], help="stderr log level")


def _cochlea_flags(p):
    g = p.add_argument_group("cochlea")
    g.add_argument("--n-band", type=int, default=40, help="band-pass filters")
    g.add_argument("--low-hz", type=float, default=cochlea.DEFAULT_LOW_HZ,
                   help="lowest filter centre in Hz")
    g.add_argument("--high-hz", type=float, default=0.0,
                   help="highest filter centre in Hz, 0 = 0.45 x sample rate")
    g.add_argument("--env-rate", type=float, default=cochlea.DEFAULT_ENV_RATE,
                   help="envelope rate in Hz")
    g.add_argument("--compression", type=float, default=cochlea.DEFAULT_COMPRESSION,
                   help="compression exponent")


def _onset_flags(p):
    g = p.add_argument_group("onsets")
    g.add_argument("--min-sep", type=float, default=onset.DEFAULT_MIN_SEP,
                   help="minimum onset separation in s")
    g.add_argument("--bandwidth", type=float, default=onset.DEFAULT_BANDWIDTH,
                   help="mean-shift bandwidth in s")
    g.add_argument("--threshold-factor", type=float, default=onset.DEFAULT_THRESHOLD_FACTOR,
                   help="gradient threshold in multiples of the median |diff|")
    g.add_argument("--baseline-frames", type=int, default=onset.DEFAULT_BASELINE_FRAMES,
                   help="preceding envelope samples whose median is the rise baseline")
    g.add_argument("--threshold", type=float, default=None,
                   help="absolute gradient threshold; overrides --threshold-factor")


def build_parser() -> argparse.ArgumentParser:
    seed = _default_seed()
    fmt = _HelpFormatter
    parser = argparse.ArgumentParser(prog="impactsound", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    p = sub.add_parser("analyze", help="waveform -> cochleagram file", formatter_class=fmt)
    p.add_argument("audio", type=Path)
    p.add_argument("out", type=Path)
    p.add_argument("--sqrt", action="store_true", help="store the square-root domain")
    _cochlea_flags(p)
    _common(p, seed)

    p = sub.add_parser("invert", help="cochleagram file -> waveform (parametric)", formatter_class=fmt)
    p.add_argument("cochleagram", type=Path)
    p.add_argument("out", type=Path)
    p.add_argument("--sample-rate", type=int, default=cochlea.DEFAULT_SAMPLE_RATE,
                   help="output sample rate")
    p.add_argument("--encoding", choices=["float32", "pcm16"], default="float32")
    _cochlea_flags(p)
    _common(p, seed)

    p = sub.add_parser("onsets", help="detect impacts; JSON lines {time, confidence}",
                       formatter_class=fmt)
    p.add_argument("audio", type=Path)
    p.add_argument("--out", type=Path, default=None, help="output file (default stdout)")
    p.add_argument("--env-rate", type=float, default=onset.DEFAULT_ENV_RATE)
    p.add_argument("--gain", type=float, default=1.0, help="amplify before detection")
    _onset_flags(p)
    _common(p, seed)

    p = sub.add_parser("train", help="train the sequence model on a manifest", formatter_class=fmt)
    p.add_argument("manifest", type=Path)
    p.add_argument("checkpoint", type=Path)
    g = p.add_argument_group("model")
    g.add_argument("--hidden-size", type=int, default=256)
    g.add_argument("--n-layers", type=int, default=2)
    g.add_argument("--k-replicate", type=int, default=3)
    g.add_argument("--replicate-at", choices=["last", "input"], default="last")
    g.add_argument("--lag", type=int, default=0, help="output lag in envelope samples")
    g.add_argument("--n-components", type=int, default=10)
    g.add_argument("--init-scale", type=float, default=0.08)
    g = p.add_argument_group("optimiser")
    g.add_argument("--learning-rate", type=float, default=0.01)
    g.add_argument("--momentum", type=float, default=0.9)
    g.add_argument("--grad-clip-norm", type=float, default=10.0)
    g.add_argument("--epochs", type=int, default=10)
    g.add_argument("--batch-size", type=int, default=16)
    g.add_argument("--epsilon-loss", type=float, default=1.0 / 625)
    g.add_argument("--align", action="store_true", help="shift-tolerant loss")
    g.add_argument("--max-shift", type=int, default=8)
    g.add_argument("--shift-alpha", type=float, default=3.0)
    g.add_argument("--shift-tau", type=float, default=2.2)
    g.add_argument("--potts-lambda", type=float, default=1.0)
    g.add_argument("--window-seconds", type=float, default=0.0,
                   help="cut recordings into windows of this length (0 = whole)")
    g.add_argument("--window-stride", type=float, default=0.5)
    g.add_argument("--loss-csv", type=Path, default=None, help="write epoch,loss rows here")
    g.add_argument("--save-init", type=Path, default=None,
                   help="also write the untrained checkpoint here")
    _cochlea_flags(p)
    _common(p, seed)

    p = sub.add_parser("predict", help="features (.ftr or manifest) -> predicted cochleagrams",
                       formatter_class=fmt)
    p.add_argument("checkpoint", type=Path)
    p.add_argument("features", type=Path, help=".ftr file, or a manifest")
    p.add_argument("out", type=Path, help="cochleagram file, or a directory for a manifest")
    p.add_argument("--split", default="test", help="manifest split to predict")
    p.add_argument("--chunk-seconds", type=float, default=10.0)
    p.add_argument("--overlap", type=float, default=0.3)
    p.add_argument("--env-rate", type=float, default=cochlea.DEFAULT_ENV_RATE)
    _common(p, seed)

    p = sub.add_parser("transfer", help="predicted cochleagram -> example-based waveform",
                       formatter_class=fmt)
    p.add_argument("cochleagram", type=Path)
    p.add_argument("db", type=Path, help="exemplar database directory")
    p.add_argument("out", type=Path)
    p.add_argument("--build-from", type=Path, default=None,
                   help="manifest whose train split builds the database if it is missing")
    p.add_argument("--coloring", type=Path, default=None,
                   help=".npz with source_mean/source_cov/target_mean/target_cov (default identity)")
    p.add_argument("--gain", type=float, default=synthesis.DEFAULT_GAIN)
    p.add_argument("--label", action="append", default=[], metavar="KEY=VALUE",
                   help="restrict matches to entries with this label (repeatable)")
    p.add_argument("--fade-seconds", type=float, default=synthesis.DEFAULT_FADE_SECONDS)
    p.add_argument("--search-frames", type=int, default=synthesis.DEFAULT_SEARCH_FRAMES,
                   help="frames either side of each detected peak tried as window start")
    p.add_argument("--onsets-out", type=Path, default=None, help="JSON lines of matched onsets")
    _onset_flags(p)
    _cochlea_flags(p)
    _common(p, seed)

    p = sub.add_parser("eval", help="metric report for predictions of a manifest",
                       formatter_class=fmt)
    p.add_argument("manifest", type=Path)
    p.add_argument("predictions", type=Path, help="directory written by `predict`")
    p.add_argument("--split", default="test")
    p.add_argument("--label-key", default="material", help="annotation used for classification")
    p.add_argument("--tol", type=float, default=0.1, help="detection tolerance in s")
    p.add_argument("--gain", type=float, default=synthesis.DEFAULT_GAIN)
    p.add_argument("--per-class-cap", type=int, default=0, help="0 = smallest class size")
    p.add_argument("--out", type=Path, default=None, help="report file (default stdout)")
    _onset_flags(p)
    _cochlea_flags(p)
    _common(p, seed)

    p = sub.add_parser("sweep", help="classification accuracy vs number of bands (CSV)",
                       formatter_class=fmt)
    p.add_argument("manifest", type=Path)
    p.add_argument("--bands", default=",".join(map(str, evalkit.DEFAULT_SWEEP)))
    p.add_argument("--label-key", default="material")
    p.add_argument("--per-class-cap", type=int, default=0, help="0 = smallest class size")
    p.add_argument("--out", type=Path, default=None, help="CSV file (default stdout)")
    p.add_argument("--low-hz", type=float, default=cochlea.DEFAULT_LOW_HZ)
    p.add_argument("--high-hz", type=float, default=0.0)
    p.add_argument("--env-rate", type=float, default=cochlea.DEFAULT_ENV_RATE)
    p.add_argument("--compression", type=float, default=cochlea.DEFAULT_COMPRESSION)
    _common(p, seed)

    p = sub.add_parser("make-synth", help="write the synthetic datasets", formatter_class=fmt)
    p.add_argument("out", type=Path)
    p.add_argument("--n-classes", type=int, default=4)
    p.add_argument("--clips-per-class", type=int, default=60)
    p.add_argument("--n-long", type=int, default=4, help="long test recordings")
    p.add_argument("--n-long-train", type=int, default=4, help="long training recordings")
    p.add_argument("--spectral-per-class", type=int, default=60)
    p.add_argument("--sample-rate", type=int, default=cochlea.DEFAULT_SAMPLE_RATE)
    _common(p, seed)

    for sp in sub.choices.values():
        for action in sp._actions:
            if action.option_strings and action.help is None:
                action.help = action.dest.replace("_", " ")
    parser._subparsers_by_name = sub.choices
    return parser


def parse_args(argv=None) -> argparse.Namespace:
    """Parse flags, folding in ``--config`` values that no flag overrides."""
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config is None:
        return args
    try:
        cfg = json.loads(args.config.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {args.config}: {exc}") from None
    if not isinstance(cfg, dict):
        raise UsageError("config file must hold a JSON object")
    sub = parser._subparsers_by_name[args.command]
    known = {a.dest for a in sub._actions if a.dest not in ("help", "config")}
    unknown = sorted(set(cfg) - known)
    if unknown:
        raise UsageError(f"unknown config keys for {args.command}: {unknown}")
    sub.set_defaults(**cfg)
    return parser.parse_args(argv)


# ----------------------------------------------------------------- helpers

def _filterbank(args, sample_rate: int) -> cochlea.Filterbank:
    return cochlea.build_filterbank(sample_rate, args.n_band, args.low_hz, args.high_hz or None)


def _write_text(path: Path | None, text: str) -> None:
    if path is None:
        sys.stdout.write(text)
    else:
        path.write_text(text, encoding="utf-8")


def _onset_kwargs(args) -> dict:
    return {"min_sep": args.min_sep, "bandwidth": args.bandwidth,
            "threshold_factor": args.threshold_factor, "threshold": args.threshold,
            "baseline_frames": args.baseline_frames}


def _onset_lines(times, confidences) -> str:
    return "".join(json.dumps({"time": round(float(t), 6), "confidence": float(c)}) + "\n"
                   for t, c in zip(times, confidences))


# ---------------------------------------------------------------- commands

def cmd_analyze(args) -> None:
    wave = read_waveform(args.audio)
    fb = _filterbank(args, wave.sample_rate)
    coch = cochlea.subband_envelopes(wave, fb, args.env_rate, args.compression, args.sqrt,
                                     args.threads)
    write_cochleagram(args.out, coch)
    log.info("%s: %d frames x %d channels", args.out, coch.n_frames, coch.n_channels)


def cmd_invert(args) -> None:
    coch = read_cochleagram(args.cochleagram, args.compression)
    fb = _filterbank(args, args.sample_rate)
    if fb.n_channels != coch.n_channels:
        raise ValueError(f"cochleagram has {coch.n_channels} channels, filterbank {fb.n_channels}"
                         " (set --n-band)")
    wave = synthesis.parametric_invert(coch, fb, args.seed, args.threads)
    write_waveform(args.out, wave, args.encoding)


def cmd_onsets(args) -> None:
    wave = read_waveform(args.audio)
    if args.gain != 1.0:
        wave = Waveform(wave.samples * args.gain, wave.sample_rate)
    found = onset.detect_onsets(wave, env_rate=args.env_rate, **_onset_kwargs(args))
    _write_text(args.out, _onset_lines(found.times, found.confidences))


def _training_data(args, manifest):
    from .seqmodel.training import window_sequences

    entries = manifest.split("train")
    if not entries:
        raise ValueError("manifest has no training entries")
    xs, ys = [], []
    fb = None
    for e in entries:
        wave = read_waveform(manifest.resolve(e.audio))
        feats = read_features(manifest.resolve(e.features))
        if fb is None:
            fb = _filterbank(args, wave.sample_rate)
        coch = cochlea.subband_envelopes(wave, fb, args.env_rate, args.compression, True,
                                         args.threads)
        if args.window_seconds > 0:
            a, b = window_sequences(feats.frames, coch.env, args.k_replicate, feats.frame_rate,
                                    args.window_seconds, args.window_stride)
            xs += a
            ys += b
        else:
            xs.append(feats.frames)
            ys.append(coch.env)
    return xs, ys


def cmd_train(args) -> None:
    from .seqmodel import LstmRegressor

    manifest = read_manifest(args.manifest)
    xs, ys = _training_data(args, manifest)
    log.info("training on %d sequences", len(xs))
    model = LstmRegressor(
        hidden_size=args.hidden_size, n_layers=args.n_layers, k_replicate=args.k_replicate,
        replicate_at=args.replicate_at, lag=args.lag, n_components=args.n_components,
        learning_rate=args.learning_rate, momentum=args.momentum,
        grad_clip_norm=args.grad_clip_norm, epochs=args.epochs, batch_size=args.batch_size,
        epsilon_loss=args.epsilon_loss, align=args.align, max_shift=args.max_shift,
        shift_alpha=args.shift_alpha, shift_tau=args.shift_tau, potts_lambda=args.potts_lambda,
        init_scale=args.init_scale, random_state=args.seed)
    if args.save_init is not None:
        model.initialize(xs, ys)
        model.save(args.save_init)
    model.fit(xs, ys)
    model.save(args.checkpoint)
    if args.loss_csv is not None:
        rows = "".join(f"{i + 1},{v:.8f}\n" for i, v in enumerate(model.loss_curve_))
        args.loss_csv.write_text("epoch,loss\n" + rows, encoding="utf-8")


def cmd_predict(args) -> None:
    from .seqmodel import LstmRegressor

    model = LstmRegressor.load(args.checkpoint)
    kw = {"env_rate": args.env_rate, "chunk_seconds": args.chunk_seconds, "overlap": args.overlap}
    if args.features.suffix != ".jsonl":
        write_cochleagram(args.out, model.predict_long(read_features(args.features), **kw))
        return
    manifest = read_manifest(args.features)
    args.out.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, e in enumerate(manifest.entries):
        if e.split != args.split:
            continue
        name = f"pred_{i:05d}.cgm"
        pred = model.predict_long(read_features(manifest.resolve(e.features)), **kw)
        write_cochleagram(args.out / name, pred)
        lines.append(json.dumps({"entry": i, "features": e.features, "prediction": name},
                                sort_keys=True))
    (args.out / "predictions.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")
    log.info("wrote %d predictions to %s", len(lines), args.out)


def _load_coloring(path):
    if path is None:
        return None
    with np.load(path) as z:
        return synthesis.ColoringTransform.from_moments(z["source_mean"], z["source_cov"],
                                                        z["target_mean"], z["target_cov"])


def cmd_transfer(args) -> None:
    pred = read_cochleagram(args.cochleagram, args.compression)
    if not (args.db / "meta.json").exists():
        if args.build_from is None:
            raise FileNotFoundError(f"no exemplar database at {args.db} (use --build-from)")
        manifest = read_manifest(args.build_from)
        entries = manifest.split("train")
        waves = [read_waveform(manifest.resolve(e.audio)) for e in entries]
        fb = _filterbank(args, waves[0].sample_rate) if waves else None
        db = synthesis.build_exemplar_db(waves, [e.onsets for e in entries], fb,
                                         [e.labels for e in entries], env_rate=pred.env_rate,
                                         compression=args.compression)
        db.save(args.db)
    db = synthesis.ExemplarDatabase.load(args.db)
    fb = _filterbank(args, db.clips[0].sample_rate)
    labels = dict(item.split("=", 1) for item in args.label)
    result = synthesis.detect_and_transfer(
        pred, db, _load_coloring(args.coloring), fb, gain=args.gain, seed=args.seed,
        label_filter=labels or None, fade_seconds=args.fade_seconds, threads=args.threads,
        search_frames=args.search_frames,
        **_onset_kwargs(args))
    write_waveform(args.out, result.waveform)
    if args.onsets_out is not None:
        lines = "".join(json.dumps({"time": round(float(t), 6), "entry": idx, "distance": d}) + "\n"
                        for t, (idx, d) in zip(result.placed_times, result.matches))
        args.onsets_out.write_text(lines, encoding="utf-8")


def _trim(a: cochlea.Cochleagram, n: int) -> cochlea.Cochleagram:
    return cochlea.Cochleagram(a.env[:n], a.env_rate, a.compression, a.sqrt_domain)


def cmd_eval(args) -> None:
    manifest = read_manifest(args.manifest)
    index = {}
    for line in (args.predictions / "predictions.jsonl").read_text(encoding="utf-8").splitlines():
        if line.strip():
            rec = json.loads(line)
            index[rec["entry"]] = args.predictions / rec["prediction"]
    fb = None
    real, pred, centers, truths, labels, det_pairs = [], [], [], [], [], []
    train_x, train_y = [], []
    for i, e in enumerate(manifest.entries):
        if e.split == "train" and args.label_key not in e.labels:
            continue
        if e.split not in ("train", args.split):
            continue
        wave = read_waveform(manifest.resolve(e.audio))
        if fb is None:
            fb = _filterbank(args, wave.sample_rate)
        coch = cochlea.subband_envelopes(wave, fb, args.env_rate, args.compression,
                                         threads=args.threads)
        if e.split == "train":
            train_x.append(coch)
            train_y.append(e.labels[args.label_key])
            continue
        if i not in index:
            raise FileNotFoundError(f"no prediction for manifest entry {i} ({e.audio})")
        p = read_cochleagram(index[i], args.compression)
        n = min(p.n_frames, coch.n_frames)
        real.append(_trim(coch, n))
        pred.append(_trim(p, n))
        centers.append(min(e.onsets[0], (n - 1) / coch.env_rate) if e.onsets else None)
        if args.label_key in e.labels:
            labels.append(e.labels[args.label_key])
        if e.onsets:
            _, found = synthesis.predicted_onsets(p, fb, args.gain, args.seed, args.threads,
                                                  **_onset_kwargs(args))
            det_pairs.append((found, e.onsets))
    if not real:
        raise ValueError(f"no {args.split} entries with predictions")
    centers = [0.5 * r.duration if c is None else c for c, r in zip(centers, real)]
    acc = None
    if labels and len(labels) == len(real) and len(set(train_y)) >= 2:
        n_frames = min(c.n_frames for c in train_x + real)
        clf = evalkit.train_classifier(
            np.stack([evalkit.clip_features(c, n_frames) for c in train_x]), train_y,
            args.per_class_cap or None, random_state=args.seed)
        acc = evalkit.classify_predictions_protocol(clf, pred, labels, n_frames)
    report = evalkit.metric_report(pred, real, centers, det_pairs, acc, args.tol)
    _write_text(args.out, json.dumps(report, indent=2, sort_keys=True) + "\n")


def cmd_sweep(args) -> None:
    manifest = read_manifest(args.manifest)
    entries = [e for e in manifest.entries if args.label_key in e.labels]
    if not entries:
        raise ValueError(f"no entries labelled with {args.label_key!r}")
    try:
        bands = [int(b) for b in args.bands.split(",") if b.strip()]
    except ValueError:
        raise UsageError(f"--bands must be comma-separated integers, got {args.bands!r}") from None
    waves = [read_waveform(manifest.resolve(e.audio)) for e in entries]
    rows = evalkit.channel_sweep(
        waves, [e.labels[args.label_key] for e in entries], [e.split == "train" for e in entries],
        bands, low_hz=args.low_hz, high_hz=args.high_hz or None, env_rate=args.env_rate,
        compression=args.compression, per_class_cap=args.per_class_cap or None, seed=args.seed,
        threads=args.threads)
    _write_text(args.out, evalkit.sweep_csv(rows))


def cmd_make_synth(args) -> None:
    counts = synthdata.make_synth(
        args.out, n_classes=args.n_classes, clips_per_class=args.clips_per_class,
        n_long=args.n_long, n_long_train=args.n_long_train,
        spectral_per_class=args.spectral_per_class, sample_rate=args.sample_rate, seed=args.seed)
    sys.stdout.write(json.dumps(counts, sort_keys=True) + "\n")


COMMANDS = {
    "analyze": cmd_analyze, "invert": cmd_invert, "onsets": cmd_onsets, "train": cmd_train,
    "predict": cmd_predict, "transfer": cmd_transfer, "eval": cmd_eval, "sweep": cmd_sweep,
    "make-synth": cmd_make_synth,
}


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
    except SystemExit as exc:  # argparse usage errors and --help
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"impactsound: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"impactsound: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=args.log_level, stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads < 1:
        print("impactsound: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"impactsound: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except FileNotFoundError as exc:
        print(f"impactsound: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, ValueError, LookupError, ArithmeticError, OSError) as exc:
        print(f"impactsound: error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
