"""Command-line surface: embed, train, finetune, evaluate, rank, gradcheck.

Runs are declared by a flat key=value config file plus flags; flags win. Every
command is deterministic for a fixed seed: all module seeds derive from the
global one, and output files are written atomically (temp + rename).

Exit codes: 0 success, 1 check failure, 2 input error. Errors print one
machine-parseable line: ``error: <Kind>: <message>``.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import dsp, encoder, ingest, retrieval, space
from .seeding import derive_seed

DEFAULT_SHAPES = ((8, 16, 12), (4, 32, 8), (64, 24, 16))
DEFAULT_SNIPPET_SECONDS = 30.0
GRADCHECK_TOLERANCE = 1e-4

_ERROR_KINDS = (
    ingest.IngestError,
    dsp.DspError,
    encoder.EncoderError,
    space.SpaceError,
    retrieval.RetrievalError,
    OSError,
    ValueError,
    KeyError,
)


class CliError(Exception):
    pass


def _write_text(path: Path, text: str) -> None:
    tmp = path.parent / (path.name + f".tmp.{os.getpid()}")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def parse_config_file(path) -> dict[str, str]:
    """Flat key = value lines; '#' starts a comment; blank lines ignored."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise CliError(f"{path}: line {lineno}: expected key = value")
        key, _, value = stripped.partition("=")
        out[key.strip()] = value.strip()
    return out


@dataclass
class RunSettings:
    manifests: list[Path]
    audio_dir: Path | None
    augmented_captions: Path | None
    encoder_spec: str
    preset: str
    seed: int
    out: Path | None
    strict: bool
    patchout: bool
    snippet_seconds: float
    checkpoint: Path | None
    whiten: dsp.WhiteningStats | None
    train: space.TrainConfig

    @property
    def geometry(self) -> encoder.PatchGeometry:
        return encoder.PRESETS[self.preset]

    def encoder_params(self, role: str) -> encoder.EncoderParams:
        return encoder.EncoderParams(seed=derive_seed(self.seed, role))


def _setting(args: argparse.Namespace, cfg: dict[str, str], key: str, default=None):
    value = getattr(args, key, None)
    if value is not None:
        return value
    if key in cfg:
        return cfg[key]
    return default


def _as_bool(value) -> bool:
    if isinstance(value, bool):
        return value
    return str(value).strip().lower() in ("1", "true", "yes", "on")


def _build_settings(args: argparse.Namespace) -> RunSettings:
    cfg: dict[str, str] = {}
    if getattr(args, "config", None):
        cfg = parse_config_file(args.config)

    manifests_raw = _setting(args, cfg, "manifest", default=[])
    if isinstance(manifests_raw, str):
        manifests_raw = [m.strip() for m in manifests_raw.split(",") if m.strip()]
    manifests = [Path(m) for m in manifests_raw]

    preset = str(_setting(args, cfg, "preset", "passt-n"))
    if preset not in encoder.PRESETS:
        raise CliError(f"unknown preset {preset!r}; choose from {sorted(encoder.PRESETS)}")
    encoder_spec = str(_setting(args, cfg, "encoder", "toy"))
    if encoder_spec != "toy" and not encoder_spec.startswith("dump:"):
        raise CliError(f"encoder must be 'toy' or 'dump:<dir>', got {encoder_spec!r}")

    whiten = None
    whiten_raw = _setting(args, cfg, "whiten")
    if whiten_raw is not None:
        try:
            mean_s, std_s = str(whiten_raw).split(",")
            whiten = dsp.WhiteningStats(mean=float(mean_s), std=float(std_s))
        except ValueError as exc:
            raise CliError(f"--whiten expects 'mean,std': {exc}") from None

    audio_dir = _setting(args, cfg, "audio_dir")
    augmented = _setting(args, cfg, "augmented_captions")
    checkpoint = _setting(args, cfg, "checkpoint")
    out = _setting(args, cfg, "out")
    seed = int(_setting(args, cfg, "seed", 0))

    train_kwargs = {"seed": seed}
    for field_name, cast in (
        ("batch_size", int),
        ("lr_max", float),
        ("lr_min", float),
        ("finetune_lr_max", float),
        ("swap_prob", float),
        ("temperature", float),
        ("out_dim", int),
        ("warmup_epochs", int),
    ):
        value = _setting(args, cfg, field_name)
        if value is not None:
            train_kwargs[field_name] = cast(value)
    epochs = _setting(args, cfg, "epochs")
    if epochs is not None:
        train_kwargs["pretrain_epochs"] = int(epochs)
        train_kwargs["finetune_epochs"] = int(epochs)

    return RunSettings(
        manifests=manifests,
        audio_dir=Path(audio_dir) if audio_dir else None,
        augmented_captions=Path(augmented) if augmented else None,
        encoder_spec=encoder_spec,
        preset=preset,
        seed=seed,
        out=Path(out) if out else None,
        strict=_as_bool(_setting(args, cfg, "strict", False)),
        patchout=_as_bool(_setting(args, cfg, "patchout", False)),
        snippet_seconds=float(_setting(args, cfg, "snippet_seconds", DEFAULT_SNIPPET_SECONDS)),
        checkpoint=Path(checkpoint) if checkpoint else None,
        whiten=whiten,
        train=space.TrainConfig(**train_kwargs),
    )


def _load_records(settings: RunSettings) -> list[ingest.ClipRecord]:
    if not settings.manifests:
        raise CliError("no manifest given (use --manifest or the config file)")
    records: list[ingest.ClipRecord] = []
    seen: set[str] = set()
    for path in settings.manifests:
        for rec in ingest.load_manifest(path, settings.audio_dir):
            if rec.clip_id in seen:
                raise ingest.DuplicateClipId(f"clip id {rec.clip_id!r} appears in multiple manifests")
            seen.add(rec.clip_id)
            records.append(rec)
    return records


def _embed_audio(
    records: list[ingest.ClipRecord], settings: RunSettings
) -> tuple[list[tuple[str, np.ndarray]], dsp.WhiteningStats]:
    params = settings.encoder_params("audio-encoder")
    geom = settings.geometry
    specs: list[tuple[str, dsp.Spectrogram]] = []
    for rec in records:
        w = ingest.read_wav(rec.audio_path)
        rng = np.random.default_rng(derive_seed(settings.seed, f"snippet:{rec.clip_id}"))
        w = dsp.snippet_or_pad(w, settings.snippet_seconds, rng)
        specs.append((rec.clip_id, dsp.logmel(w)))
    stats = settings.whiten or dsp.compute_whitening_stats(s for _, s in specs)
    seg_frames = dsp.seconds_to_frames(geom.max_input_seconds)
    entries = []
    for clip_id, spec in specs:
        segments = dsp.segment(dsp.whiten(spec, stats), seg_frames)
        grids = [encoder.extract_patches(s, geom) for s in segments]
        if settings.patchout:
            rng = np.random.default_rng(derive_seed(settings.seed, f"patchout:{clip_id}"))
            grids = [encoder.structured_patchout(g, geom.drop_f, geom.drop_t, rng) for g in grids]
        entries.append((clip_id, encoder.embed_long_audio(grids, params)))
    return entries, stats


def _encode_text(text: str, vocab: encoder.Vocabulary, params: encoder.EncoderParams) -> np.ndarray:
    tokens = encoder.tokenize(encoder.normalize_text(text), vocab)
    return encoder.text_encode(tokens, params, len(vocab))


def _embed_captions(records: list[ingest.ClipRecord], settings: RunSettings) -> list[tuple[str, np.ndarray]]:
    vocab = encoder.Vocabulary.default()
    params = settings.encoder_params("text-encoder")
    return [
        (f"{rec.clip_id}#{k}", _encode_text(cap, vocab, params))
        for rec in records
        for k, cap in enumerate(rec.captions)
    ]


def _embed_variants(
    aug_sets: list[ingest.AugmentedCaptionSet], settings: RunSettings
) -> list[tuple[str, np.ndarray]]:
    vocab = encoder.Vocabulary.default()
    params = settings.encoder_params("text-encoder")
    return [
        (f"{aug.clip_id}#{aug.caption_index}@{j}", _encode_text(v, vocab, params))
        for aug in aug_sets
        for j, v in enumerate(aug.variants)
    ]


def _dump_dir(settings: RunSettings) -> Path:
    return Path(settings.encoder_spec[len("dump:") :])


def _raw_embeddings(
    records: list[ingest.ClipRecord], settings: RunSettings
) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Raw (pre-projection) vectors for every clip and caption, toy or dump-backed."""
    if settings.encoder_spec == "toy":
        audio_entries, _ = _embed_audio(records, settings)
        caption_entries = _embed_captions(records, settings)
        return dict(audio_entries), dict(caption_entries)
    base = _dump_dir(settings)
    audio = ingest.read_embedding_dump(base / "audio.embd").as_dict()
    captions = ingest.read_embedding_dump(base / "captions.embd").as_dict()
    return audio, captions


def _train_pairs(records: list[ingest.ClipRecord], settings: RunSettings) -> list[space.TrainPair]:
    audio, captions = _raw_embeddings(records, settings)
    pairs = []
    for rec in records:
        if rec.clip_id not in audio:
            raise CliError(f"no audio embedding for clip {rec.clip_id!r}")
        caps = []
        for k in range(len(rec.captions)):
            key = f"{rec.clip_id}#{k}"
            if key not in captions:
                raise CliError(f"no caption embedding for {key!r}")
            caps.append(captions[key])
        pairs.append(space.TrainPair(rec.clip_id, audio[rec.clip_id], tuple(caps)))
    return pairs


def _augmap(records: list[ingest.ClipRecord], settings: RunSettings) -> space.AugMap | None:
    if settings.augmented_captions is None:
        return None
    aug_sets = ingest.load_augmented_captions(settings.augmented_captions)
    known = {rec.clip_id for rec in records}
    aug_sets = [a for a in aug_sets if a.clip_id in known]
    if settings.encoder_spec == "toy":
        entries = dict(_embed_variants(aug_sets, settings))
    else:
        entries = ingest.read_embedding_dump(_dump_dir(settings) / "variants.embd").as_dict()
    augmap: dict[tuple[str, int], tuple[np.ndarray, ...]] = {}
    for aug in aug_sets:
        vecs = []
        for j in range(len(aug.variants)):
            key = f"{aug.clip_id}#{aug.caption_index}@{j}"
            if key not in entries:
                raise CliError(f"no variant embedding for {key!r}")
            vecs.append(entries[key])
        augmap[(aug.clip_id, aug.caption_index)] = tuple(vecs)
    return augmap


def _require_out(settings: RunSettings) -> Path:
    if settings.out is None:
        raise CliError("no output directory given (use --out)")
    settings.out.mkdir(parents=True, exist_ok=True)
    return settings.out


def _loss_csv(curve) -> str:
    lines = ["step,lr,loss"]
    lines += [f"{p.step},{p.lr!r},{p.loss!r}" for p in curve]
    return "\n".join(lines)


def cmd_embed(settings: RunSettings) -> int:
    if settings.encoder_spec != "toy":
        raise CliError("embed requires the toy encoder; dump files already hold embeddings")
    out = _require_out(settings)
    records = _load_records(settings)
    audio_entries, stats = _embed_audio(records, settings)
    caption_entries = _embed_captions(records, settings)
    ingest.write_embedding_dump(audio_entries, out / "audio.embd")
    ingest.write_embedding_dump(caption_entries, out / "captions.embd")
    n_variants = 0
    if settings.augmented_captions is not None:
        variant_entries = _embed_variants(ingest.load_augmented_captions(settings.augmented_captions), settings)
        ingest.write_embedding_dump(variant_entries, out / "variants.embd")
        n_variants = len(variant_entries)
    print(
        f"embedded {len(audio_entries)} clips, {len(caption_entries)} captions, "
        f"{n_variants} variants -> {out} (whiten mean={stats.mean!r} std={stats.std!r})"
    )
    return 0


def _run_training(settings: RunSettings, phase: str) -> int:
    out = _require_out(settings)
    records = _load_records(settings)
    pairs = _train_pairs(records, settings)
    augmap = _augmap(records, settings) if phase == "finetune" else None
    if phase == "finetune" and settings.strict and augmap is None:
        raise space.MissingAugmentation("finetune --strict requires --augmented-captions")
    init = None
    if settings.checkpoint is not None:
        ckpt = space.load_checkpoint(settings.checkpoint)
        init = (ckpt.audio_head, ckpt.text_head)
    result = space.train(
        pairs, settings.train, phase=phase, augmented=augmap, strict=settings.strict, init=init
    )
    space.save_checkpoint(
        out / "checkpoint.ackp",
        result.audio_head,
        result.text_head,
        result.state,
        result.total_steps,
        settings.train,
    )
    _write_text(out / "loss.csv", _loss_csv(result.curve) + "\n")
    first = result.curve[0].loss if result.curve else float("nan")
    last = result.curve[-1].loss if result.curve else float("nan")
    print(
        f"{phase}: {len(pairs)} clips, {result.total_steps} steps, "
        f"loss {first:.4f} -> {last:.4f}, checkpoint -> {out / 'checkpoint.ackp'}"
    )
    return 0


def cmd_train(settings: RunSettings) -> int:
    return _run_training(settings, "pretrain")


def cmd_finetune(settings: RunSettings) -> int:
    return _run_training(settings, "finetune")


def cmd_evaluate(settings: RunSettings) -> int:
    out = _require_out(settings)
    if settings.checkpoint is None:
        raise CliError("evaluate requires --checkpoint")
    ckpt = space.load_checkpoint(settings.checkpoint)
    records = _load_records(settings)
    pairs = _train_pairs(records, settings)
    queries, index = retrieval.build_eval(pairs, ckpt.audio_head, ckpt.text_head)
    report = retrieval.evaluate(queries, index)
    table = retrieval.format_metrics_table(report)
    _write_text(out / "metrics.csv", retrieval.metrics_csv(report) + "\n")
    _write_text(out / "report.txt", table + "\n")
    print(table)
    return 0


def cmd_rank(settings: RunSettings, query: str, top: int) -> int:
    if settings.checkpoint is None:
        raise CliError("rank requires --checkpoint")
    ckpt = space.load_checkpoint(settings.checkpoint)
    records = _load_records(settings)
    if settings.encoder_spec == "toy":
        audio = dict(_embed_audio(records, settings)[0])
    else:
        audio = ingest.read_embedding_dump(_dump_dir(settings) / "audio.embd").as_dict()
    ids = [rec.clip_id for rec in records if rec.clip_id in audio]
    if not ids:
        raise CliError("no audio embeddings for the given manifest")
    index = retrieval.RetrievalIndex.build(
        ids, space.project(np.stack([audio[i] for i in ids]), ckpt.audio_head)
    )
    vocab = encoder.Vocabulary.default()
    qvec = space.project(
        _encode_text(query, vocab, settings.encoder_params("text-encoder")), ckpt.text_head
    )
    result = retrieval.rank(qvec, index, query_id="cli-query")
    sims = index.vectors @ space.l2_normalize(qvec)
    by_id = dict(zip(index.ids, sims))
    for position, clip_id in enumerate(result.ranked_ids[:top], start=1):
        print(f"{position:>3}  {by_id[clip_id]:+.4f}  {clip_id}")
    return 0


def cmd_gradcheck(seed: int, shapes, perturb: float) -> int:
    worst = 0.0
    for shape in shapes:
        err = space.gradient_check(seed, shape, perturb=perturb)
        print(f"gradcheck shape={shape}: max relative error {err:.3e}")
        worst = max(worst, err)
    if worst < GRADCHECK_TOLERANCE:
        print(f"gradcheck PASS (max {worst:.3e} < {GRADCHECK_TOLERANCE})")
        return 0
    print(f"gradcheck FAIL (max {worst:.3e} >= {GRADCHECK_TOLERANCE})")
    return 1


def _parse_shapes(text: str):
    shapes = []
    for part in text.split(","):
        dims = part.strip().lower().split("x")
        if len(dims) != 3:
            raise CliError(f"bad shape {part!r}; expected NxD_inxD_out")
        shapes.append(tuple(int(d) for d in dims))
    return tuple(shapes)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="acre", description="audio-caption retrieval engine")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="flat key=value config file; flags override it")
        p.add_argument("--manifest", action="append", help="manifest CSV (repeatable)")
        p.add_argument("--audio-dir", dest="audio_dir", help="base directory for audio paths")
        p.add_argument("--augmented-captions", dest="augmented_captions", help="JSONL variants file")
        p.add_argument("--encoder", help="toy | dump:<dir>")
        p.add_argument("--preset", choices=sorted(encoder.PRESETS), help="patch geometry preset")
        p.add_argument("--epochs", type=int, help="epoch count override")
        p.add_argument("--seed", type=int, help="global seed (default 0)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--strict", action="store_const", const=True, help="fail on missing augmentations")
        p.add_argument("--checkpoint", help="checkpoint path (evaluate/rank input, train init)")
        p.add_argument("--batch-size", dest="batch_size", type=int)
        p.add_argument("--lr-max", dest="lr_max", type=float)
        p.add_argument("--lr-min", dest="lr_min", type=float)
        p.add_argument("--finetune-lr-max", dest="finetune_lr_max", type=float)
        p.add_argument("--swap-prob", dest="swap_prob", type=float)
        p.add_argument("--temperature", type=float)
        p.add_argument("--out-dim", dest="out_dim", type=int)
        p.add_argument("--warmup-epochs", dest="warmup_epochs", type=int)
        p.add_argument("--snippet-seconds", dest="snippet_seconds", type=float)
        p.add_argument("--whiten", help="fixed whitening stats as 'mean,std'")
        p.add_argument("--patchout", action="store_const", const=True, help="apply patchout when embedding")

    for name in ("embed", "train", "finetune", "evaluate"):
        add_common(sub.add_parser(name))

    rank_p = sub.add_parser("rank")
    add_common(rank_p)
    rank_p.add_argument("--query", required=True, help="text query")
    rank_p.add_argument("--top", type=int, default=10)

    grad_p = sub.add_parser("gradcheck")
    grad_p.add_argument("--seed", type=int, default=0)
    grad_p.add_argument(
        "--shapes",
        default=",".join("x".join(str(d) for d in s) for s in DEFAULT_SHAPES),
        help="comma-separated NxD_inxD_out triples",
    )
    grad_p.add_argument("--perturb", type=float, default=0.0, help=argparse.SUPPRESS)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "gradcheck":
            return cmd_gradcheck(args.seed, _parse_shapes(args.shapes), args.perturb)
        settings = _build_settings(args)
        if args.command == "embed":
            return cmd_embed(settings)
        if args.command == "train":
            return cmd_train(settings)
        if args.command == "finetune":
            return cmd_finetune(settings)
        if args.command == "evaluate":
            return cmd_evaluate(settings)
        if args.command == "rank":
            return cmd_rank(settings, args.query, args.top)
        raise CliError(f"unknown command {args.command!r}")
    except CliError as exc:
        print(f"error: UsageError: {exc}", file=sys.stderr)
        return 2
    except _ERROR_KINDS as exc:
        message = str(exc).replace("\n", " ")
        print(f"error: {type(exc).__name__}: {message}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
