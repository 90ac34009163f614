"""Command-line interface.

Exit codes: 0 success, 2 usage or input error, 3 state or compatibility error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import codec
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .codec import INSTRUMENTS, MASK, ScoreGrid, Track, Vocabulary
from .config import CorpusManifest, ManifestEntry, RunConfig, assign_split
from .denoiser import Denoiser, preset
from .diffusion import GenerationTrace, RoleMask, generate, infill, make_schedule
from .ingest import FilteredOut, IngestReport, corpus_files, ingest_corpus, load_song, preprocess, write_note_list
from .metrics import FEATURES, chord_accuracy, feature_histogram, kde_pdf, kl_divergence, scott_bandwidth
from .training import OptimConfig, fit, make_optimizer

log = logging.getLogger("trackdiff")


class CliError(Exception):
    def __init__(self, message: str, code: int = 2):
        super().__init__(message)
        self.code = code


def _write(path: str | Path, data: bytes | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    path.write_bytes(data)


def _json(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def load_vocab(path: str | Path) -> Vocabulary:
    try:
        return Vocabulary.from_json(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise CliError(f"vocabulary file not found: {path}", 3) from None
    except (ValueError, KeyError) as exc:
        raise CliError(f"invalid vocabulary {path}: {exc}", 3) from None


def load_score(path: str | Path) -> tuple[ScoreGrid, int]:
    try:
        return codec.read_score(Path(path).read_bytes())
    except FileNotFoundError:
        raise CliError(f"score file not found: {path}") from None
    except ValueError as exc:
        raise CliError(f"{path}: {exc}") from None


def load_model(path: str | Path, vocab: Vocabulary) -> Denoiser:
    try:
        model, _, _ = load_checkpoint(Path(path).read_bytes(), expected_K=vocab.K)
    except FileNotFoundError:
        raise CliError(f"checkpoint not found: {path}", 3) from None
    except (CheckpointError, ValueError) as exc:
        raise CliError(f"{path}: {exc}", 3) from None
    model.eval()
    return model


def parse_tracks(text: str | None) -> list[Track]:
    if not text:
        return []
    try:
        tracks = [Track.parse(name) for name in text.split(",") if name.strip()]
    except ValueError as exc:
        raise CliError(str(exc)) from None
    if len(set(tracks)) != len(tracks):
        raise CliError(f"duplicate track in {text!r}")
    return tracks


# --------------------------------------------------------------------------
# build-vocab / encode / decode / stats


def cmd_build_vocab(args) -> int:
    files = corpus_files(Path(args.corpus_dir)) if Path(args.corpus_dir).is_dir() else []
    if not files:
        raise CliError("no input files")
    fragments, report = ingest_corpus(Path(args.corpus_dir), args.max_bars)
    if not fragments:
        raise CliError(f"all files filtered out: {json.dumps(report.as_dict())}")
    vocab = codec.build_vocabulary(song for _, _, song in fragments)
    _write(args.out, vocab.to_json())
    summary = {"K": vocab.K, "pitch_tokens": vocab.counts(), "ingest": report.as_dict()}
    if args.report:
        _write(args.report, _json(summary))
    if not args.quiet:
        print(json.dumps(summary, sort_keys=True))
    return 0


def cmd_encode(args) -> int:
    vocab = load_vocab(args.vocab)
    src = Path(args.input)
    if not src.exists():
        raise CliError(f"no input files: {src} does not exist")
    if src.is_dir():
        root = src
        if not corpus_files(src):
            raise CliError("no input files")
        fragments, report = ingest_corpus(src, args.max_bars)
    else:
        root = src.parent
        fragments, report = ingest_corpus_file(src, args.max_bars)
    out = Path(args.out)
    entries = []
    for path, index, song in fragments:
        rel = path.relative_to(root).as_posix()
        name = rel.replace("/", "__").rsplit(".", 1)[0] + f"_{index:03d}.score"
        try:
            score = codec.encode(song, vocab)
        except ValueError as exc:
            raise CliError(f"{rel} fragment {index}: {exc}") from None
        _write(out / name, codec.write_score(score, vocab.K))
        entries.append(ManifestEntry(rel, index, name, song.bars, [t.label for t in song.tracks()],
                                     assign_split(rel, index, args.seed)))
    manifest = CorpusManifest(entries, args.seed)
    _write(out / "manifest.json", manifest.to_json())
    if not args.quiet:
        print(json.dumps({"fragments": len(entries), "ingest": report.as_dict()}, sort_keys=True))
    return 0


def ingest_corpus_file(path: Path, max_bars: int):
    report = IngestReport(files=1)
    try:
        song, tempos = load_song(path)
        fragments = preprocess(song, tempos, max_bars)
    except FilteredOut as exc:
        raise CliError(f"{path}: filtered out ({exc.reason})") from None
    except ValueError as exc:
        raise CliError(f"{path}: {exc}") from None
    report.kept = 1
    report.fragments = len(fragments)
    return [(path, i, f) for i, f in enumerate(fragments)], report


def cmd_decode(args) -> int:
    vocab = load_vocab(args.vocab)
    score, K = load_score(args.score)
    if K != vocab.K:
        raise CliError(f"vocab mismatch: score K={K}, vocabulary K={vocab.K}", 3)
    try:
        song = codec.decode(score, vocab, strict=not args.lenient, key_shift=-args.key_shift)
    except ValueError as exc:
        raise CliError(str(exc)) from None
    if args.out.endswith((".mid", ".midi")):
        from .smf import write_smf

        channels = {t: i for i, t in enumerate(INSTRUMENTS)}
        channels[Track.DRUM] = 9
        programs = {channels[Track.BASS]: 33, channels[Track.GUITAR]: 25, channels[Track.PIANO]: 0,
                    channels[Track.STRING]: 48, channels[Track.MELODY]: 73}
        events = [(channels[n.track], n.onset * 120, max(n.duration, 1) * 120, n.pitch, 80) for n in song.notes]
        _write(args.out, write_smf(events, 480, programs))
    else:
        _write(args.out, write_note_list(song))
    return 0


def cmd_stats(args) -> int:
    """Feature histograms and sizes over a directory of score files."""
    vocab = load_vocab(args.vocab)
    paths = sorted(Path(args.scores).glob("*.score"))
    if not paths:
        raise CliError("no input files")
    hist = {f: np.zeros(16) for f in FEATURES}
    notes = 0
    for path in paths:
        score, _ = load_score(path)
        song = codec.decode(score, vocab, strict=False)
        notes += len(song.notes)
        for f in FEATURES:
            hist[f] += feature_histogram(song.notes, f).bins
    doc = {"scores": len(paths), "notes": notes, "K": vocab.K,
           "histograms": {f: h.tolist() for f, h in hist.items()}}
    if args.out:
        _write(args.out, _json(doc))
    if not args.quiet:
        print(json.dumps(doc, sort_keys=True))
    return 0


# --------------------------------------------------------------------------
# train


def _load_split(manifest: CorpusManifest, base: Path, name: str) -> list[ScoreGrid]:
    return [load_score(base / e.score)[0] for e in manifest.split(name)]


def cmd_train(args) -> int:
    try:
        cfg = RunConfig.load(args.config, seed=args.seed, steps=args.steps, manifest=args.manifest,
                             vocab=args.vocab, checkpoint_dir=args.out)
    except (ValueError, TypeError, FileNotFoundError) as exc:
        raise CliError(f"bad config: {exc}") from None
    vocab = load_vocab(cfg.vocab)
    manifest_path = Path(cfg.manifest)
    if not manifest_path.exists():
        raise CliError(f"manifest not found: {manifest_path}", 3)
    manifest = CorpusManifest.from_json(manifest_path.read_text(encoding="utf-8"))
    train = _load_split(manifest, manifest_path.parent, "train")
    valid = _load_split(manifest, manifest_path.parent, "valid")
    if not train:
        raise CliError("no training scores in manifest", 3)
    for score in train + valid:
        if score.grid.max() >= vocab.K:
            raise CliError("score tokens exceed vocabulary K", 3)

    ckdir = Path(cfg.checkpoint_dir)
    ckdir.mkdir(parents=True, exist_ok=True)
    ocfg = OptimConfig(lr=cfg.lr, warmup=cfg.warmup, weight_decay=cfg.weight_decay,
                       total_steps=cfg.total_steps(len(train)))
    start, best = 0, None
    if args.resume:
        try:
            model, extra, optimizer = load_checkpoint(Path(args.resume).read_bytes(), vocab.K,
                                                      lambda m: make_optimizer(m, ocfg))
        except (FileNotFoundError, CheckpointError, ValueError) as exc:
            raise CliError(f"cannot resume: {exc}", 3) from None
        rng = np.random.default_rng()
        rng.bit_generator.state = extra["rng"]
        start, best = extra["step"], extra.get("best_valid")
    else:
        try:
            mcfg = preset(cfg.preset, vocab.K, **cfg.model)
        except (ValueError, TypeError) as exc:
            raise CliError(f"bad model config: {exc}") from None
        model = Denoiser(mcfg, seed=cfg.seed)
        optimizer = make_optimizer(model, ocfg)
        rng = np.random.default_rng(cfg.seed)
    if model.cfg.K != vocab.K:
        raise CliError(f"vocab mismatch: model K={model.cfg.K}, vocabulary K={vocab.K}", 3)
    schedule = make_schedule(model.cfg.T)
    support = torch.from_numpy(vocab.row_support())
    _write(ckdir / "config.json", cfg.to_json())

    log_path = ckdir / "loss.csv"
    new_log = not log_path.exists() or start == 0
    log_file = log_path.open("w" if start == 0 else "a", newline="", encoding="utf-8")
    writer = csv.writer(log_file)
    if new_log:
        writer.writerow(["step", "train_loss", "valid_loss"])
    state = {"best": best}

    def on_log(step, train_loss, valid_loss):
        writer.writerow([step, repr(train_loss), "" if valid_loss is None else repr(valid_loss)])
        if valid_loss is not None and not args.quiet:
            print(f"step {step} train {train_loss:.5f} valid {valid_loss:.5f}", flush=True)

    def on_best(step, valid_loss):
        state["best"] = valid_loss
        _write(ckdir / "best.ckpt", save_checkpoint(model, extra={"step": step, "valid_loss": valid_loss}))

    def on_checkpoint(step):
        extra = {"step": step, "rng": rng.bit_generator.state, "best_valid": state["best"], "seed": cfg.seed}
        _write(ckdir / "last.ckpt", save_checkpoint(model, optimizer, extra))
        log_file.flush()

    torch.manual_seed(cfg.seed)
    try:
        fit(model, optimizer, train, valid, schedule, ocfg, rng, batch_size=cfg.batch_size, lam=cfg.lam,
            support=support, start_step=start, valid_every=cfg.valid_every, seed=cfg.seed,
            best_valid=best, on_log=on_log, on_best=on_best, on_checkpoint=on_checkpoint, stop_step=args.until)
    finally:
        log_file.close()
    if not valid and not (ckdir / "best.ckpt").exists():
        _write(ckdir / "best.ckpt", (ckdir / "last.ckpt").read_bytes())
    return 0


# --------------------------------------------------------------------------
# generate / infill


def _check_output(score: ScoreGrid) -> None:
    if (score.grid == MASK).any():
        raise CliError("internal error: output still contains MASK tokens", 3)


def cmd_generate(args) -> int:
    source = parse_tracks(args.source)
    target = parse_tracks(args.target)
    if not target:
        raise CliError("empty target list")
    if set(source) & set(target):
        raise CliError(f"overlap between source and target: {sorted(t.label for t in set(source) & set(target))}")
    vocab = load_vocab(args.vocab)
    if args.score:
        score, K = load_score(args.score)
        if K != vocab.K:
            raise CliError(f"vocab mismatch: score K={K}, vocabulary K={vocab.K}", 3)
        if score.roles[Track.CHORD] != "empty" and Track.CHORD not in target and Track.CHORD not in source:
            source.append(Track.CHORD)
        missing = [t.label for t in source if score.roles[t] == "empty"]
        if missing:
            raise CliError(f"source tracks absent from input: {missing}")
    else:
        if source:
            raise CliError("--source requires an input score")
        if not 1 <= args.length <= codec.MAX_L:
            raise CliError(f"length out of range [1, {codec.MAX_L}]")
        if args.chord_as_target and Track.CHORD not in target:
            target.append(Track.CHORD)
        score = ScoreGrid(np.full((codec.N_ROWS, args.length), codec.EMPTY), {})
    model = load_model(args.ckpt, vocab)
    if score.L > model.cfg.max_L:
        raise CliError(f"score length {score.L} exceeds model max_L {model.cfg.max_L}")
    roles = RoleMask.from_lists(source, target)
    schedule = make_schedule(model.cfg.T)
    trace = GenerationTrace()
    out = generate(model.predict, score, roles, schedule, args.seed, args.temperature,
                   support=vocab.row_support(), sample_x0=args.sample_x0, trace=trace)
    _check_output(out)
    _write(args.out, codec.write_score(out, vocab.K))
    report = {"seed": args.seed, "T": schedule.T, "temperature": args.temperature,
              "roles": {t.label: r for t, r in roles.roles.items()}, "masked_counts": trace.masked_counts}
    _write(args.report or f"{args.out}.json", _json(report))
    return 0


def parse_region(text: str, L: int) -> tuple[Track, int, int]:
    try:
        name, start, end = text.split(":")
        track, start, end = Track.parse(name), int(start), int(end)
    except ValueError:
        raise CliError(f"bad mask region {text!r}; expected track:start:end") from None
    if not 0 <= start < end <= L:
        raise CliError(f"mask region {text} out of range for L={L}")
    return track, start, end


def cmd_infill(args) -> int:
    vocab = load_vocab(args.vocab)
    score, K = load_score(args.score)
    if K != vocab.K:
        raise CliError(f"vocab mismatch: score K={K}, vocabulary K={vocab.K}", 3)
    mask = np.zeros(score.grid.shape, dtype=bool)
    for text in args.mask:
        track, start, end = parse_region(text, score.L)
        if score.roles[track] == "empty":
            raise CliError(f"cannot infill uninvolved track {track.label}")
        mask[score.rows(track), start:end] = True
    model = load_model(args.ckpt, vocab)
    schedule = make_schedule(model.cfg.T)
    trace = GenerationTrace()
    out = infill(model.predict, score, mask, schedule, args.seed, args.temperature,
                 support=vocab.row_support(), trace=trace)
    _check_output(out)
    _write(args.out, codec.write_score(out, vocab.K))
    return 0


# --------------------------------------------------------------------------
# eval

METRICS = ("ca", "kl_pitch", "kl_dur", "kl_ioi")


def _target_tracks(score: ScoreGrid) -> list[Track]:
    tracks = [t for t in INSTRUMENTS if score.roles[t] == "tgt"]
    return tracks or [t for t in INSTRUMENTS if score.roles[t] != "empty"]


def cmd_eval(args) -> int:
    metrics = [m.strip() for m in args.metrics.split(",") if m.strip()]
    unknown = set(metrics) - set(METRICS)
    if unknown or not metrics:
        raise CliError(f"unknown metrics {sorted(unknown)}; choose from {METRICS}")
    if bool(args.reference) == bool(args.train_dist):
        raise CliError("exactly one of --reference or --train-dist is required")
    if "ca" in metrics and args.train_dist:
        raise CliError("ca requires references")
    vocab = load_vocab(args.vocab)
    gen_dir = Path(args.generated)
    gen_files = {p.name: p for p in sorted(gen_dir.glob("*.score"))}
    if not gen_files:
        raise CliError("no generated files")

    generated = {}
    for name, path in gen_files.items():
        score, _ = load_score(path)
        generated[name] = (codec.decode(score, vocab, strict=False), _target_tracks(score))

    report: dict = {}
    details: dict = {}
    if args.reference:
        ref_files = {p.name: p for p in sorted(Path(args.reference).glob("*.score"))}
        unpaired = sorted(set(gen_files) ^ set(ref_files))
        if unpaired:
            raise CliError(f"unpaired files: {unpaired}")
        references = {n: codec.decode(load_score(p)[0], vocab, strict=False) for n, p in ref_files.items()}
        if "ca" in metrics:
            hits = total = 0.0
            for name, (song, tracks) in generated.items():
                try:
                    ca = chord_accuracy([song], [references[name]], tracks)
                except ValueError as exc:
                    raise CliError(f"{name}: {exc}") from None
                n = len(tracks) * references[name].bars
                hits += ca * n
                total += n
            report["ca"] = hits / total
        ref_hist = {
            f: sum((feature_histogram([n for n in references[name].notes if n.track in tracks], f).bins
                    for name, (_, tracks) in generated.items()), np.zeros(16))
            for f in FEATURES
        }
    else:
        try:
            doc = json.loads(Path(args.train_dist).read_text(encoding="utf-8"))
            ref_hist = {f: np.asarray(doc["histograms"][f], dtype=float) for f in FEATURES}
        except (FileNotFoundError, KeyError, ValueError) as exc:
            raise CliError(f"bad training distribution file: {exc}") from None

    for f in FEATURES:
        key = f"kl_{f}"
        if key not in metrics:
            continue
        gen_hist = sum((feature_histogram([n for n in song.notes if n.track in tracks], f).bins
                        for song, tracks in generated.values()), np.zeros(16))
        if gen_hist.sum() == 0 or ref_hist[f].sum() == 0:
            raise CliError(f"{key}: empty distribution")
        report[key] = kl_divergence(kde_pdf(gen_hist), kde_pdf(ref_hist[f]))
        details[key] = {"generated_count": float(gen_hist.sum()), "reference_count": float(ref_hist[f].sum()),
                        "bandwidth_generated": scott_bandwidth(gen_hist),
                        "bandwidth_reference": scott_bandwidth(ref_hist[f])}
    if args.out:
        _write(args.out, _json(report))
    if args.details:
        _write(args.details, _json(details))
    if not args.quiet:
        print(json.dumps(report, sort_keys=True))
    return 0


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="trackdiff", description=__doc__.splitlines()[0])
    parser.add_argument("--quiet", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help):
        p = sub.add_parser(name, help=help)
        p.set_defaults(func=func)
        p.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS)
        return p

    p = add("build-vocab", cmd_build_vocab, "ingest a corpus and write the vocabulary")
    p.add_argument("corpus_dir")
    p.add_argument("--out", required=True)
    p.add_argument("--report")
    p.add_argument("--max-bars", type=int, default=32)
    p.add_argument("--grid", type=int, choices=[16], default=16)

    p = add("encode", cmd_encode, "encode a file or corpus into score files plus a manifest")
    p.add_argument("input")
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--max-bars", type=int, default=32)
    p.add_argument("--grid", type=int, choices=[16], default=16)

    p = add("decode", cmd_decode, "decode a score file to a note list or MIDI file")
    p.add_argument("score")
    p.add_argument("--vocab", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--key-shift", type=int, default=0, help="shift applied at normalization; undone here")
    p.add_argument("--lenient", action="store_true", help="drop malformed pitch/duration pairs")

    p = add("stats", cmd_stats, "feature histograms of a score directory (training distribution)")
    p.add_argument("scores")
    p.add_argument("--vocab", required=True)
    p.add_argument("--out")

    p = add("train", cmd_train, "train the denoiser")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--manifest")
    p.add_argument("--vocab")
    p.add_argument("--out", help="checkpoint directory")
    p.add_argument("--resume")
    p.add_argument("--until", type=int, help="stop after this step; resume later with --resume")

    p = add("generate", cmd_generate, "generate target tracks")
    p.add_argument("score", nargs="?")
    p.add_argument("--source")
    p.add_argument("--target", required=True)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--sample-x0", action="store_true")
    p.add_argument("--length", type=int, default=512)
    p.add_argument("--chord-as-target", action="store_true")
    p.add_argument("--out", required=True)
    p.add_argument("--report")

    p = add("infill", cmd_infill, "regenerate masked regions of a score")
    p.add_argument("score")
    p.add_argument("--mask", action="append", required=True, help="track:start:end (repeatable)")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--vocab", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--temperature", type=float, default=1.0)
    p.add_argument("--out", required=True)

    p = add("eval", cmd_eval, "objective metrics")
    p.add_argument("--generated", required=True)
    p.add_argument("--reference")
    p.add_argument("--train-dist")
    p.add_argument("--metrics", default=",".join(METRICS))
    p.add_argument("--vocab", required=True)
    p.add_argument("--out")
    p.add_argument("--details")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
