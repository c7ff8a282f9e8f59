"""svc command line: extract | train | convert | stream | eval.

Exit codes: 0 ok, 1 operational error, 2 configuration error.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import queue
import sys
import threading
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .audio_io import AudioError, Waveform, read_wav, write_wav
from .config import ConfigError, RunConfig, dump_config, load_config, to_dict, with_seed
from .dsp import DSPError, SVCFError
from .features import extract_tracks, feature_paths, load_tracks, save_tracks
from .inference import Converter, StreamingConverter
from .losses import LossError
from .metrics import MetricError, evaluate_waveforms
from .nets import NetError, SVCModel
from .training import (CheckpointError, Trainer, TrainingError, load_checkpoint, load_corpus,
                       save_checkpoint)

log = logging.getLogger("svc")

OPERATIONAL = (AudioError, DSPError, SVCFError, CheckpointError, TrainingError, MetricError, NetError,
               LossError, ad.AutodiffError, OSError)
MANIFEST = "manifest.json"


class _WarningCounter(logging.Handler):
    def __init__(self):
        super().__init__(logging.WARNING)
        self.count = 0

    def emit(self, record):
        self.count += 1


# ------------------------------------------------------------------ helpers

def _workers() -> int:
    return max(1, min(4, os.cpu_count() or 1))


def load_model(cfg: RunConfig, path) -> SVCModel:
    """Rebuild a model from a checkpoint; speaker ids come from the parameter names."""
    b = load_checkpoint(path, cfg.model_hash())
    speakers = [n[len("spk."):] for n in b.tensors if n.startswith("spk.")]
    model = SVCModel(cfg.model, speakers, seed=cfg.seed)
    params = model.parameters()
    missing = [n for n in params if n not in b.tensors]
    if missing:
        raise CheckpointError(f"{path}: checkpoint does not match model config (missing {missing[:3]})")
    for name, p in params.items():
        if b.tensors[name].shape != p.data.shape:
            raise CheckpointError(f"{path}: {name} has shape {b.tensors[name].shape}, model wants {p.data.shape}")
        p.data = b.tensors[name].astype(p.data.dtype)
    return model


def _converter(cfg: RunConfig, args) -> Converter:
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required")
    model = load_model(cfg, args.checkpoint)
    if model.multi_speaker and args.speaker is None:
        raise NetError(f"--speaker is required; available: {', '.join(model.speaker_ids)}")
    return Converter(model, cfg.features, cfg.seed, args.speaker)


def _file_hash(path: Path, cfg: RunConfig) -> str:
    h = hashlib.sha256(path.read_bytes())
    h.update(json.dumps({"sr": cfg.sample_rate, "features": to_dict(cfg.features)}, sort_keys=True).encode())
    return h.hexdigest()


# ------------------------------------------------------------------ commands

def cmd_extract(cfg: RunConfig, args) -> int:
    in_dir, out_dir = Path(args.in_dir), Path(args.out_dir)
    if not in_dir.is_dir():
        raise AudioError(f"input directory not found: {in_dir}")
    wavs = sorted(in_dir.rglob("*.wav"))
    out_dir.mkdir(parents=True, exist_ok=True)
    mpath = out_dir / MANIFEST
    manifest = json.loads(mpath.read_text()) if mpath.exists() else {}

    def work(wav: Path):
        rel = wav.relative_to(in_dir)
        key = rel.as_posix()
        dest = out_dir / rel.parent
        digest = _file_hash(wav, cfg)
        if manifest.get(key) == digest and all(p.exists() for p in feature_paths(dest, wav.stem).values()):
            return key, digest, "skipped", None
        try:
            tracks = extract_tracks(read_wav(wav, cfg.sample_rate), cfg.features)
            dest.mkdir(parents=True, exist_ok=True)
            save_tracks(dest, wav.stem, tracks)
        except (AudioError, DSPError) as e:
            return key, None, "failed", str(e)
        return key, digest, "written", None

    with ThreadPoolExecutor(_workers()) as pool:
        results = list(pool.map(work, wavs))
    errors = []
    counts = {"written": 0, "skipped": 0, "failed": 0}
    for key, digest, status, err in results:
        counts[status] += 1
        if digest:
            manifest[key] = digest
        else:
            manifest.pop(key, None)
            errors.append(f"{key}: {err}")
    mpath.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    print(f"written {counts['written']}\tskipped {counts['skipped']}\tfailed {counts['failed']}")
    for e in errors:
        print(f"error\t{e}", file=sys.stderr)
    return 1 if errors else 0


def cmd_train(cfg: RunConfig, args) -> int:
    if not cfg.corpus_root:
        raise ConfigError("corpus_root is not set")
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out / "effective_config.yaml")
    feature_dir = cfg.feature_dir if cfg.feature_provider == "svcf" else None
    corpus = load_corpus(cfg.corpus_root, cfg.sample_rate, cfg.features, feature_dir, cfg.train.prefetch_depth)
    model = SVCModel(cfg.model, corpus.speakers, seed=cfg.seed)
    trainer = Trainer(model, corpus, cfg.train, cfg.loss, cfg.features, cfg.model_hash())
    if args.checkpoint:
        trainer.load_bundle(load_checkpoint(args.checkpoint, cfg.model_hash()))
    remaining = max(0, cfg.train.scaled("total_steps") - trainer.step)
    log_path = out / "train_log.jsonl"
    records = []
    if args.checkpoint and log_path.exists():
        records = [json.loads(line) for line in log_path.read_text().splitlines() if line.strip()]
        records = [r for r in records if r["step"] < trainer.step]
    with open(log_path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")

        def on_report(rep):
            rec = rep.as_log()
            records.append(rec)
            line = json.dumps(rec)
            fh.write(line + "\n")
            fh.flush()
            print(line, flush=True)

        def on_checkpoint(t):
            save_checkpoint(out / f"ckpt_{t.step:08d}.svck", t.to_bundle())

        trainer.run(remaining, on_report, on_checkpoint)
    save_checkpoint(out / "final.svck", trainer.to_bundle())
    if records:
        from .report import plot_training
        plot_training(records, out / "train_loss.png")
    print(f"checkpoint\t{out / 'final.svck'}\tstep {trainer.step}", file=sys.stderr)
    return 0


def cmd_convert(cfg: RunConfig, args) -> int:
    conv = _converter(cfg, args)
    src = Path(args.input)
    w = read_wav(src, cfg.sample_rate)
    tracks = load_tracks(cfg.feature_dir, src.stem) if cfg.feature_provider == "svcf" else None
    y = conv.convert(w, tracks)
    write_wav(args.output, y)
    return 0


def cmd_stream(cfg: RunConfig, args) -> int:
    conv = _converter(cfg, args)
    chunk = args.chunk or 4096
    s = StreamingConverter(conv, chunk, cfg.sample_rate)
    src = sys.stdin.buffer
    dst = sys.stdout.buffer
    inq: queue.Queue = queue.Queue(maxsize=8)
    outq: queue.Queue = queue.Queue(maxsize=8)
    errors = []

    def reader():
        tail = b""
        try:
            while True:
                data = src.read(chunk * 4)
                if not data:
                    break
                data = tail + data
                n = len(data) // 4 * 4
                tail = data[n:]
                if n:
                    inq.put(np.frombuffer(data[:n], dtype="<f4").astype(np.float64))
            if tail:
                log.warning("dropping %d trailing bytes (not a whole float32 sample)", len(tail))
        except OSError as e:
            errors.append(e)
        inq.put(None)

    def writer():
        while True:
            y = outq.get()
            if y is None:
                break
            try:
                dst.write(np.asarray(y, dtype="<f4").tobytes())
                dst.flush()
            except OSError as e:
                errors.append(e)
                break

    threads = [threading.Thread(target=reader, daemon=True), threading.Thread(target=writer, daemon=True)]
    for t in threads:
        t.start()
    while (x := inq.get()) is not None:
        y = s.push(x)
        if y.size:
            outq.put(y)
    y = s.finish()
    if y.size:
        outq.put(y)
    outq.put(None)
    threads[1].join()
    if errors:
        raise errors[0]
    audio = s.samples_in / cfg.sample_rate
    rtf = f"{s.real_time_factor:.3f}" if s.compute_seconds > 0 and audio > 0 else "n/a"
    print(f"rtf\t{rtf}\taudio_s\t{audio:.3f}\tcompute_s\t{s.compute_seconds:.3f}\t"
          f"lookahead_frames\t{s.margin}", file=sys.stderr)
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    ref_dir, hyp_dir = Path(args.ref_dir), Path(args.hyp_dir)
    for d in (ref_dir, hyp_dir):
        if not d.is_dir():
            raise AudioError(f"directory not found: {d}")
    refs = sorted(p.relative_to(ref_dir) for p in ref_dir.rglob("*.wav"))
    missing = [r for r in refs if not (hyp_dir / r).is_file()]
    matched = [r for r in refs if (hyp_dir / r).is_file()]

    def work(rel):
        try:
            m = evaluate_waveforms(read_wav(ref_dir / rel, cfg.sample_rate),
                                   read_wav(hyp_dir / rel, cfg.sample_rate), cfg.features)
            return rel, m, None
        except (AudioError, DSPError, MetricError) as e:
            return rel, None, str(e)

    with ThreadPoolExecutor(_workers()) as pool:
        results = list(pool.map(work, matched))
    rows = [(rel.as_posix(), m) for rel, m, err in results if m is not None]
    failed = [(rel.as_posix(), err) for rel, m, err in results if m is None]
    lines = ["file\tVDE\tFFE\tframes"]
    lines += [f"{name}\t{m.vde:.6f}\t{m.ffe:.6f}\t{m.n_frames}" for name, m in rows]
    total = sum(m.n_frames for _, m in rows)
    agg_vde = sum(m.vde * m.n_frames for _, m in rows) / total if total else float("nan")
    agg_ffe = sum(m.ffe * m.n_frames for _, m in rows) / total if total else float("nan")
    lines.append(f"ALL\t{agg_vde:.6f}\t{agg_ffe:.6f}\t{total}")
    text = "\n".join(lines) + "\n"
    sys.stdout.write(text)
    for rel in missing:
        print(f"missing\t{rel.as_posix()}", file=sys.stderr)
    for name, err in failed:
        print(f"error\t{name}\t{err}", file=sys.stderr)
    if args.report:
        rp = Path(args.report)
        rp.parent.mkdir(parents=True, exist_ok=True)
        rp.write_text(text)
        rp.with_suffix(".json").write_text(json.dumps({
            "files": [{"file": n, **dataclasses.asdict(m)} for n, m in rows],
            "aggregate": {"vde": agg_vde, "ffe": agg_ffe, "n_frames": total},
            "missing": [r.as_posix() for r in missing],
            "errors": dict(failed),
        }, indent=1))
        if rows:
            from .report import plot_metrics
            plot_metrics([n for n, _ in rows], [m.vde for _, m in rows], [m.ffe for _, m in rows],
                         rp.with_suffix(".png"))
    return 1 if missing or failed else 0


# ------------------------------------------------------------------ entry point

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML run configuration (defaults when omitted)")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--strict", action="store_true", help="treat logged warnings as errors")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="svc", description="Singing voice conversion toolkit.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("extract", parents=[common], help="compute feature files for a WAV directory")
    s.add_argument("in_dir")
    s.add_argument("out_dir")
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("train", parents=[common], help="train from corpus_root")
    s.add_argument("--checkpoint", help="resume from this checkpoint")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("convert", parents=[common], help="convert one WAV file")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--speaker")
    s.add_argument("input")
    s.add_argument("output")
    s.set_defaults(func=cmd_convert)

    s = sub.add_parser("stream", parents=[common], help="float32 LE stdin -> float32 LE stdout")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--speaker")
    s.add_argument("--chunk", type=int, default=4096, help="samples per chunk, rounded down to a hop multiple")
    s.set_defaults(func=cmd_stream)

    s = sub.add_parser("eval", parents=[common], help="VDE/FFE between matching WAV files")
    s.add_argument("--report", help="also write TSV here, plus .json and .png siblings")
    s.add_argument("ref_dir")
    s.add_argument("hyp_dir")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("config", parents=[common], help="print the effective configuration")
    s.set_defaults(func=lambda cfg, args: (sys.stdout.write(dump_config(cfg)), 0)[1])
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    counter = _WarningCounter()
    logging.getLogger().addHandler(counter)
    try:
        cfg = with_seed(load_config(args.config), args.seed)
        if getattr(args, "chunk", None) is not None and args.chunk < 1:
            raise ConfigError("--chunk must be positive")
        ad.set_precision(cfg.precision)
        code = args.func(cfg, args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except OPERATIONAL as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    finally:
        logging.getLogger().removeHandler(counter)
    if args.strict and counter.count and code == 0:
        print(f"error: {counter.count} warning(s) under --strict", file=sys.stderr)
        return 1
    return code


if __name__ == "__main__":
    sys.exit(main())
