"""``vc``: preprocess a corpus, train, convert, extract embeddings and evaluate.

Every subcommand works inside a run directory::

    RUN/config.json          resolved configuration (provenance)
    RUN/manifest.jsonl       one utterance per line
    RUN/registry.json        speakers, training indices, held-out flags
    RUN/stats/<spk>.json     per-speaker scaling statistics
    RUN/cache/<spk>/*.melc   cached log-mels
    RUN/ckpt_<step>.bin      checkpoints
    RUN/history.jsonl        per-step losses
    RUN/loss_curve.png
    RUN/embeddings/<spk>.json
    RUN/reports/             evaluation tables
"""
from __future__ import annotations

import argparse
import contextlib
import copy
import dataclasses
import fcntl
import hashlib
import json
import logging
import pickle
import re
import sys
from pathlib import Path

import numpy as np

from .convert import convert_mel, convert_utterance, extract_embedding, speaker_profile
from .dataset import (SpeakerRegistry, build_manifest, dump_manifest, load_manifest,
                      merge_registries, split_held_out)
from .dsp import (MelConfig, SpeakerScalingStats, choose_stats_subset, clip_silence,
                  compute_scaling_stats, load_audio, mel_spectrogram, mel_to_audio, read_mel_cache,
                  write_mel_cache, write_wav)
from .errors import MissingArtifact, RunLocked, VCError
from .eval import ConversionOutcome, DEFAULT_KS, chance_row, rank_target, topk_report, train_sid
from .nets import ArchConfig, SpeakerEmbedding, compact_arch, load_checkpoint, param_checksum
from .training import TrainConfig, read_history, train

logger = logging.getLogger("embvc")

ARCH_PRESETS = {"default": ArchConfig, "compact": compact_arch}


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------

@dataclasses.dataclass(frozen=True)
class RunConfig:
    mel: MelConfig = MelConfig()
    arch: ArchConfig = ArchConfig()
    arch_preset: str = "default"
    train: TrainConfig = TrainConfig()
    seed: int = 0
    silence_db: float = 40.0
    layout: str = "speaker_dir"
    held_out: tuple = ()
    stats_max_files: int = 20
    stitch: str = "concat"
    sid: dict = dataclasses.field(default_factory=dict)

    def to_dict(self) -> dict:
        arch = self.arch.to_dict()
        arch["preset"] = self.arch_preset
        return {"mel": self.mel.to_dict(), "arch": arch, "train": self.train.to_dict(),
                "seed": self.seed, "silence_db": self.silence_db, "layout": self.layout,
                "held_out": list(self.held_out), "stats_max_files": self.stats_max_files,
                "stitch": self.stitch, "sid": dict(self.sid)}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        arch_d = dict(d.get("arch", {}))
        preset = arch_d.pop("preset", "default")
        if preset not in ARCH_PRESETS:
            raise ValueError(f"unknown arch preset {preset!r}; choose from {sorted(ARCH_PRESETS)}")
        arch = ArchConfig.from_dict({**ARCH_PRESETS[preset]().to_dict(), **arch_d}).validate()
        seed = int(d.get("seed", 0))
        train_d = {**d.get("train", {}), "seed": seed}
        if d.get("stitch", "concat") not in ("concat", "overlap"):
            raise ValueError("stitch must be 'concat' or 'overlap'")
        return cls(mel=MelConfig.from_dict(d.get("mel", {})), arch=arch, arch_preset=preset,
                   train=TrainConfig.from_dict(train_d), seed=seed,
                   silence_db=float(d.get("silence_db", 40.0)),
                   layout=d.get("layout", "speaker_dir"), held_out=tuple(d.get("held_out", ())),
                   stats_max_files=int(d.get("stats_max_files", 20)),
                   stitch=d.get("stitch", "concat"), sid=dict(d.get("sid", {})))


def _merge(base: dict, update: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in update.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def resolve_config(run_dir=None, config_file=None, overrides: dict | None = None) -> RunConfig:
    """Defaults, then the run's saved config, then ``config_file``, then flag overrides."""
    d: dict = {}
    if run_dir is not None and (Path(run_dir) / "config.json").exists():
        d = _merge(d, json.loads((Path(run_dir) / "config.json").read_text()))
    if config_file is not None:
        d = _merge(d, json.loads(Path(config_file).read_text()))
    d = _merge(d, overrides or {})
    return RunConfig.from_dict(d)


# --------------------------------------------------------------------------
# run directory
# --------------------------------------------------------------------------

class RunDir:
    def __init__(self, root):
        self.root = Path(root)

    config = property(lambda self: self.root / "config.json")
    manifest = property(lambda self: self.root / "manifest.jsonl")
    registry = property(lambda self: self.root / "registry.json")
    history = property(lambda self: self.root / "history.jsonl")
    loss_curve = property(lambda self: self.root / "loss_curve.png")
    reports = property(lambda self: self.root / "reports")
    sid_model = property(lambda self: self.root / "sid.pkl")

    def stats_path(self, spk: str) -> Path:
        return self.root / "stats" / f"{spk}.json"

    def embedding_path(self, spk: str) -> Path:
        return self.root / "embeddings" / f"{spk}.json"

    def cache_path(self, spk: str, audio_path: str) -> Path:
        digest = hashlib.sha1(str(Path(audio_path).resolve()).encode()).hexdigest()[:8]
        return self.root / "cache" / spk / f"{Path(audio_path).stem}-{digest}.melc"

    def checkpoints(self) -> list[Path]:
        found = []
        for p in self.root.glob("ckpt_*.bin"):
            m = re.fullmatch(r"ckpt_(\d+)\.bin", p.name)
            if m:
                found.append((int(m.group(1)), p))
        return [p for _, p in sorted(found)]

    def latest_checkpoint(self) -> Path:
        ckpts = self.checkpoints()
        if not ckpts:
            raise MissingArtifact(f"no checkpoint in {self.root}; run `vc train --run {self.root}`")
        return ckpts[-1]

    @contextlib.contextmanager
    def lock(self):
        """Advisory lock so two processes never write the same run directory."""
        self.root.mkdir(parents=True, exist_ok=True)
        with open(self.root / ".lock", "a") as fh:
            try:
                fcntl.flock(fh, fcntl.LOCK_EX | fcntl.LOCK_NB)
            except BlockingIOError:
                raise RunLocked(f"{self.root} is in use by another process") from None
            try:
                yield
            finally:
                fcntl.flock(fh, fcntl.LOCK_UN)

    def require(self, path: Path) -> Path:
        if not path.exists():
            raise MissingArtifact(f"{path} is missing; run `vc preprocess --data DIR --out "
                                  f"{self.root}` first")
        return path

    def load_prepared(self):
        """Registry, manifest records and stats written by ``preprocess``."""
        registry = SpeakerRegistry.load(self.require(self.registry))
        records = load_manifest(self.require(self.manifest))
        stats = {spk: SpeakerScalingStats.load(self.require(self.stats_path(spk)))
                 for spk in registry.ids}
        return registry, records, stats

    def cached_mels(self, records, speaker_id: str) -> list[np.ndarray]:
        paths = [self.root / r.cache_path for r in records
                 if r.speaker_id == speaker_id and r.cache_path]
        if not paths:
            raise MissingArtifact(f"no cached spectrograms for {speaker_id}; run `vc preprocess` "
                                  f"for {self.root}")
        return [read_mel_cache(self.require(p)) for p in paths]


def _write_if_changed(path: Path, text: str) -> int:
    if path.exists() and path.read_text() == text:
        return 0
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return 1


# --------------------------------------------------------------------------
# plots
# --------------------------------------------------------------------------

def _pyplot():
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    return plt


def plot_history(history_path, out_path) -> None:
    rows = read_history(history_path)
    if not rows:
        return
    plt = _pyplot()
    steps = [r["step"] for r in rows]
    fig, ax = plt.subplots(figsize=(7, 4))
    for key in ("loss_d", "loss_g_adv", "loss_cycle"):
        ax.plot(steps, [r[key] for r in rows], label=key, linewidth=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=100)
    plt.close(fig)


def plot_spectrograms(before, after, out_path) -> None:
    plt = _pyplot()
    fig, axes = plt.subplots(1, 2, figsize=(10, 4), sharey=True)
    for ax, mel, title in ((axes[0], before, "source"), (axes[1], after, "converted")):
        ax.imshow(mel, origin="lower", aspect="auto", cmap="magma")
        ax.set_title(title)
        ax.set_xlabel("frame")
    axes[0].set_ylabel("mel bin")
    fig.tight_layout()
    fig.savefig(out_path, dpi=100)
    plt.close(fig)


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def _utterance_mel(path, cfg: RunConfig) -> np.ndarray:
    wav = clip_silence(load_audio(path, cfg.mel), cfg.silence_db, cfg.mel.sample_rate)
    return mel_spectrogram(wav, cfg.mel)


def cmd_preprocess(args, cfg: RunConfig) -> int:
    run = RunDir(args.out)
    with run.lock():
        previous = json.loads(run.config.read_text()) if run.config.exists() else None
        mel_changed = previous is not None and previous.get("mel") != cfg.mel.to_dict()
        registry, records = build_manifest(args.data, cfg.layout)
        train_reg, held = split_held_out(registry, cfg.held_out)
        registry = merge_registries(train_reg, held)

        failures, written = [], 0
        for rec in records:
            cache = run.cache_path(rec.speaker_id, rec.audio_path)
            rec.audio_path = str(Path(rec.audio_path).resolve())
            if rec.duration is None:
                failures.append((rec.audio_path, "unreadable or empty WAV"))
                continue
            fresh = (cache.exists() and not mel_changed
                     and cache.stat().st_mtime_ns >= Path(rec.audio_path).stat().st_mtime_ns)
            if not fresh:
                try:
                    mel = _utterance_mel(rec.audio_path, cfg)
                except (VCError, ValueError, OSError) as exc:
                    failures.append((rec.audio_path, f"{type(exc).__name__}: {exc}"))
                    continue
                cache.parent.mkdir(parents=True, exist_ok=True)
                write_mel_cache(cache, mel)
                written += 1
            rec.cache_path = str(cache.relative_to(run.root))

        for spk in registry.ids:
            usable = [r for r in records if r.speaker_id == spk and r.cache_path]
            if not usable:
                failures.append((spk, "no usable audio for this speaker"))
                continue
            subset = choose_stats_subset(usable, cfg.seed, cfg.stats_max_files)
            stats = compute_scaling_stats([read_mel_cache(run.root / r.cache_path) for r in subset],
                                          speaker_id=spk,
                                          subset_files=[r.audio_path for r in subset],
                                          seed=cfg.seed)
            written += _write_if_changed(run.stats_path(spk), json.dumps(stats.to_dict(), indent=1))

        written += _write_if_changed(run.manifest, dump_manifest(records))
        written += _write_if_changed(run.registry, json.dumps(registry.to_list(), indent=1))
        written += _write_if_changed(run.config, json.dumps(cfg.to_dict(), indent=1))

    print(f"{len(registry)} speakers ({registry.N} for training), {len(records)} utterances, "
          f"{written} files written")
    if failures:
        print(f"vc: error: {len(failures)} item(s) could not be processed:", file=sys.stderr)
        for what, why in failures:
            print(f"  {what}: {why}", file=sys.stderr)
        return 1
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    run = RunDir(args.run)
    registry, records, stats = run.load_prepared()
    with run.lock():
        utts = {spk: run.cached_mels(records, spk) for spk in registry.train_ids}
        resume = None
        if args.resume:
            resume = run.latest_checkpoint() if args.resume == "latest" else Path(args.resume)
        else:
            for old in run.checkpoints():
                old.unlink()
        _write_if_changed(run.config, json.dumps(cfg.to_dict(), indent=1))
        every = max(1, cfg.train.total_steps // 20)

        def report(r):
            if r.step % every == 0 or r.step == cfg.train.total_steps:
                logger.info("step %d  loss_d %.4f  loss_g_adv %.4f  loss_cycle %.4f", r.step,
                            r.loss_d, r.loss_g_adv, r.loss_cycle)

        last = train(registry, utts, stats, cfg.train, run.root, arch=cfg.arch, resume=resume,
                     callback=report)
        plot_history(run.history, run.loss_curve)
        model = load_checkpoint(last, expect_arch=cfg.arch).model
        for spk in registry.train_ids:
            path = run.embedding_path(spk)
            path.parent.mkdir(parents=True, exist_ok=True)
            extract_embedding(model, utts[spk], stats[spk]).save(path)
    print(f"trained to step {cfg.train.total_steps}; checkpoint {last}")
    return 0


def _load_model(run: RunDir, cfg: RunConfig, checkpoint=None):
    path = Path(checkpoint) if checkpoint else run.latest_checkpoint()
    return load_checkpoint(path, expect_arch=cfg.arch).model, path


def _known_profile(run: RunDir, model, speaker_id: str):
    """Stats and embedding of a preprocessed speaker (held-out speakers are embedded on demand)."""
    registry, records, _ = run.load_prepared()
    registry[speaker_id]  # UnknownSpeaker for ids the run has never seen
    stats = SpeakerScalingStats.load(run.require(run.stats_path(speaker_id)))
    emb_path = run.embedding_path(speaker_id)
    if emb_path.exists():
        return stats, SpeakerEmbedding.load(emb_path)
    return stats, extract_embedding(model, run.cached_mels(records, speaker_id), stats)


def cmd_convert(args, cfg: RunConfig) -> int:
    run = RunDir(args.run)
    model, ckpt = _load_model(run, cfg, args.checkpoint)
    before = param_checksum(model)
    if args.target_id:
        t_stats, t_emb = _known_profile(run, model, args.target_id)
    else:
        t_stats, t_emb = speaker_profile(model, args.target_samples, cfg.mel, "target",
                                         cfg.silence_db)
    if args.source_id:
        s_stats = SpeakerScalingStats.load(run.require(run.stats_path(args.source_id)))
    else:
        s_stats = compute_scaling_stats([_utterance_mel(args.source, cfg)], speaker_id="source")
    audio, src_mel, out_mel = convert_utterance(model, args.source, s_stats, t_emb, t_stats,
                                                cfg.mel, cfg.silence_db, cfg.stitch,
                                                return_mels=True)
    write_wav(args.out, audio, cfg.mel.sample_rate)
    if param_checksum(model) != before:
        raise VCError("model parameters changed during conversion")
    if args.plot:
        plot_spectrograms(src_mel, out_mel, Path(args.out).with_suffix(".png"))
    print(f"wrote {args.out} ({len(audio) / cfg.mel.sample_rate:.2f} s) using {ckpt.name}")
    return 0


def cmd_embed(args, cfg: RunConfig) -> int:
    run = RunDir(args.run)
    model, _ = _load_model(run, cfg, args.checkpoint)
    stats, emb = speaker_profile(model, args.samples, cfg.mel, args.speaker_id, cfg.silence_db)
    out = Path(args.out)
    emb.save(out)
    stats.save(out.with_name(out.stem + ".stats.json"))
    print(f"wrote {out}")
    return 0


@dataclasses.dataclass
class GridSpec:
    """Which conversions ``evaluate`` runs; speaker groups come from the registry."""

    sources: list
    targets: list
    utterances_per_pair: int = 2
    reference_utterances: int = 4
    genders: dict = dataclasses.field(default_factory=dict)
    ks: tuple = DEFAULT_KS

    @classmethod
    def parse(cls, text_or_path: str) -> "GridSpec":
        text = text_or_path.strip()
        if not text.startswith("{"):
            text = Path(text_or_path).read_text()
        d = json.loads(text)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown grid keys: {sorted(unknown)}")
        spec = cls(**{**d, "ks": tuple(d.get("ks", DEFAULT_KS))})
        if not spec.sources or not spec.targets:
            raise ValueError("grid needs at least one source and one target speaker")
        if spec.utterances_per_pair < 1 or spec.reference_utterances < 1:
            raise ValueError("utterance counts must be positive")
        return spec


def cmd_evaluate(args, cfg: RunConfig) -> int:
    if args.chance_only:
        row = chance_row(args.speakers)
        print("chance " + "  ".join(f"top-{k}: {v:.2f}" for k, v in row.items()))
        return 0
    grid = GridSpec.parse(args.grid)
    run = RunDir(args.run)
    registry, records, stats = run.load_prepared()
    for spk in sorted(set(grid.sources) | set(grid.targets)):
        registry[spk]  # UnknownSpeaker before any work is done
    model, _ = _load_model(run, cfg, args.checkpoint)
    before = param_checksum(model)

    if args.train_sid:
        mels = {spk: run.cached_mels(records, spk) for spk in registry.ids}
        sid, info = train_sid(mels, seed=cfg.seed, **cfg.sid)
        with open(run.sid_model, "wb") as fh:
            pickle.dump(sid, fh)
        (run.root / "sid_info.json").write_text(json.dumps(info, indent=1))
        print(f"speaker identifier: {len(sid.classes_)} speakers, "
              f"held-out top-1 {info['eval_top1']:.1f}%")
    else:
        if not run.sid_model.exists():
            raise MissingArtifact(f"{run.sid_model} not found; pass --train-sid")
        with open(run.sid_model, "rb") as fh:
            sid = pickle.load(fh)

    profiles = {}
    for spk in grid.targets:
        refs = run.cached_mels(records, spk)[:grid.reference_utterances]
        profiles[spk] = extract_embedding(model, refs, stats[spk])

    def group(spk):
        return "in" if registry[spk].in_dataset else "out"

    outcomes = []
    for src in grid.sources:
        utts = run.cached_mels(records, src)[-grid.utterances_per_pair:]
        for tgt in grid.targets:
            if tgt == src:
                continue
            for mel in utts:
                out = convert_mel(model, mel, stats[src], profiles[tgt], stats[tgt], cfg.stitch)
                audio = mel_to_audio(out, cfg.mel, seed=cfg.seed)
                outcomes.append(ConversionOutcome(group(src), group(tgt),
                                                  grid.genders.get(tgt, "?"),
                                                  rank_target(sid, audio, tgt, cfg.mel), src, tgt))
    if param_checksum(model) != before:
        raise VCError("model parameters changed during evaluation")
    report = topk_report(outcomes, grid.ks)
    run.reports.mkdir(exist_ok=True)
    report.save(run.reports / "topk.json")
    M = len(sid.classes_)
    chance = chance_row(M, grid.ks)
    table = report.to_table() + "\n" + f"{'chance':>8} {'':>8} {'':>6} {'':>5} " + " ".join(
        f"{chance[k]:7.1f}" if k in chance else f"{'-':>7}" for k in report.ks)
    (run.reports / "topk.txt").write_text(table + "\n")
    print(table)
    return 0


# --------------------------------------------------------------------------
# argument parsing
# --------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, metavar="FILE",
                        help="JSON config layered over the defaults and the run's saved config")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, metavar="N")
    common.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)

    parser = argparse.ArgumentParser(prog="vc", parents=[common],
                                     description="Embedding-conditioned voice conversion.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("preprocess", parents=[common], help="scan a corpus, cache log-mels and stats")
    p.add_argument("--data", required=True, nargs="+", metavar="DIR")
    p.add_argument("--out", required=True, metavar="RUN")
    p.add_argument("--held-out", nargs="*", metavar="ID", help="speakers kept out of training")
    p.add_argument("--layout", choices=("speaker_dir", "prefix"))
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("train", parents=[common], help="train the three networks")
    p.add_argument("--run", required=True, metavar="RUN")
    p.add_argument("--steps", type=int, metavar="N")
    p.add_argument("--resume", metavar="CKPT", help="checkpoint path, or 'latest'")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("convert", parents=[common], help="convert one utterance")
    p.add_argument("--run", required=True, metavar="RUN")
    p.add_argument("--source", required=True, metavar="WAV")
    p.add_argument("--source-id", metavar="ID", help="use this speaker's stored stats for the source")
    target = p.add_mutually_exclusive_group(required=True)
    target.add_argument("--target-id", metavar="ID")
    target.add_argument("--target-samples", nargs="+", metavar="WAV")
    p.add_argument("--out", required=True, metavar="WAV")
    p.add_argument("--checkpoint", metavar="CKPT")
    p.add_argument("--plot", action="store_true", help="also write a before/after spectrogram PNG")
    p.set_defaults(func=cmd_convert)

    p = sub.add_parser("embed", parents=[common], help="speaker embedding from sample files")
    p.add_argument("--run", required=True, metavar="RUN")
    p.add_argument("--samples", required=True, nargs="+", metavar="WAV")
    p.add_argument("--out", required=True, metavar="FILE")
    p.add_argument("--speaker-id", default="unseen", metavar="ID")
    p.add_argument("--checkpoint", metavar="CKPT")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("evaluate", parents=[common], help="top-K speaker-identification accuracy")
    p.add_argument("--run", metavar="RUN")
    p.add_argument("--grid", metavar="SPEC", help="JSON file or inline JSON object")
    p.add_argument("--train-sid", action="store_true")
    p.add_argument("--checkpoint", metavar="CKPT")
    p.add_argument("--chance-only", action="store_true")
    p.add_argument("--speakers", type=int, metavar="M", help="speaker count for --chance-only")
    p.set_defaults(func=cmd_evaluate)
    return parser


def _overrides(args) -> dict:
    o: dict = {}
    if getattr(args, "seed", None) is not None:
        o["seed"] = args.seed
    if getattr(args, "steps", None) is not None:
        o["train"] = {"total_steps": args.steps}
    if getattr(args, "held_out", None) is not None:
        o["held_out"] = args.held_out
    if getattr(args, "layout", None) is not None:
        o["layout"] = args.layout
    return o


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "evaluate":
        if args.chance_only:
            if not args.speakers or args.speakers < 1:
                parser.error("--chance-only needs --speakers M")
        elif not args.run or not args.grid:
            parser.error("evaluate needs --run and --grid (or --chance-only --speakers M)")
        elif not args.grid.strip():
            parser.error("empty grid spec")
    run_dir = args.out if args.command == "preprocess" else args.run
    try:
        cfg = resolve_config(run_dir, getattr(args, "config", None), _overrides(args))
        if args.command == "evaluate" and not args.chance_only:
            try:
                GridSpec.parse(args.grid)
            except (ValueError, json.JSONDecodeError) as exc:
                parser.error(f"bad grid spec: {exc}")
        return args.func(args, cfg)
    except (VCError, FileNotFoundError, ValueError, KeyError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"vc: error: {msg}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
