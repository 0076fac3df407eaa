"""Dataset and file-format layer: caption manifests, augmented captions, WAV audio,
and the binary embedding-dump container.

External formats
----------------
Manifest CSV (UTF-8, quoted fields allowed)::

    file_name,caption_1,caption_2,caption_3,caption_4,caption_5[,keywords]

One row per clip; the file name doubles as the clip id; ``keywords`` is
optional and semicolon-separated.

Augmented captions: UTF-8 JSON lines, one record per line::

    {"clip_id": "...", "caption_index": 0, "variants": ["...", ...5 strings]}

Embedding dump (binary, little-endian): magic ``ACRE``, version u32=1,
dim u32, count u64, then per entry a u16 id length, the UTF-8 id, and dim
32-bit floats. Round-trips bit-exactly. The spectrogram cache reuses the same
container with version 2 and one extra u32 header field (frames per entry).
"""

from __future__ import annotations

import csv
import json
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .dsp import Spectrogram, Waveform

CAPTIONS_PER_CLIP = 5
VARIANTS_PER_CAPTION = 5

_REQUIRED_COLUMNS = ("file_name", "caption_1", "caption_2", "caption_3", "caption_4", "caption_5")

DUMP_MAGIC = b"ACRE"
_DUMP_VERSION = 1
_CACHE_VERSION = 2
_HEADER = struct.Struct("<4sIIQ")


class IngestError(Exception):
    pass


class MissingColumn(IngestError):
    pass


class DuplicateClipId(IngestError):
    pass


class WrongCaptionCount(IngestError):
    pass


class VariantCountMismatch(IngestError):
    pass


class UnsupportedEncoding(IngestError):
    pass


class CorruptHeader(IngestError):
    pass


class DimMismatch(IngestError):
    pass


class BadMagic(IngestError):
    pass


class TruncatedFile(IngestError):
    pass


@dataclass(frozen=True)
class ClipRecord:
    clip_id: str
    audio_path: Path
    captions: tuple[str, ...]
    keywords: tuple[str, ...] = ()


@dataclass(frozen=True)
class AugmentedCaptionSet:
    clip_id: str
    caption_index: int
    variants: tuple[str, ...]


@dataclass(frozen=True)
class EmbeddingDump:
    dim: int
    entries: tuple[tuple[str, np.ndarray], ...]

    def as_dict(self) -> dict[str, np.ndarray]:
        return dict(self.entries)


def load_manifest(path, audio_dir=None) -> list[ClipRecord]:
    """Parse a manifest CSV into ClipRecords, preserving row order.

    Audio paths resolve against audio_dir when given, else against the
    manifest's own directory. Every malformed row raises with its line number;
    nothing is dropped silently.
    """
    path = Path(path)
    base = Path(audio_dir) if audio_dir is not None else path.parent
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise MissingColumn(f"{path}: empty manifest")
        col = {name.strip(): i for i, name in enumerate(header)}
        for name in _REQUIRED_COLUMNS:
            if name not in col:
                raise MissingColumn(f"{path}: missing column {name!r}")
        kw_idx = col.get("keywords")

        records: list[ClipRecord] = []
        seen: set[str] = set()
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            name_idx = col["file_name"]
            clip_id = row[name_idx].strip() if name_idx < len(row) else ""
            if not clip_id:
                raise MissingColumn(f"{path}: row {lineno}: empty file_name")
            if clip_id in seen:
                raise DuplicateClipId(f"{path}: row {lineno}: duplicate clip id {clip_id!r}")
            seen.add(clip_id)

            captions = []
            for k in range(CAPTIONS_PER_CLIP):
                idx = col[f"caption_{k + 1}"]
                if idx >= len(row) or not row[idx].strip():
                    raise WrongCaptionCount(
                        f"{path}: row {lineno} (clip {clip_id!r}): expected "
                        f"{CAPTIONS_PER_CLIP} non-empty captions"
                    )
                captions.append(row[idx])

            keywords: tuple[str, ...] = ()
            if kw_idx is not None and kw_idx < len(row):
                keywords = tuple(k.strip() for k in row[kw_idx].split(";") if k.strip())

            records.append(ClipRecord(clip_id, base / clip_id, tuple(captions), keywords))
    return records


def load_augmented_captions(path) -> list[AugmentedCaptionSet]:
    """Parse a JSON-lines augmented-captions file.

    Clip ids are not checked against any manifest here; that validation
    belongs to the caller that has one.
    """
    path = Path(path)
    sets: list[AugmentedCaptionSet] = []
    seen: set[tuple[str, int]] = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise IngestError(f"{path}: line {lineno}: invalid JSON record: {exc}") from None
            try:
                clip_id = str(rec["clip_id"])
                caption_index = int(rec["caption_index"])
                variants = rec["variants"]
            except (KeyError, TypeError, ValueError) as exc:
                raise IngestError(f"{path}: line {lineno}: malformed record: {exc}") from None
            if not isinstance(variants, list) or len(variants) != VARIANTS_PER_CAPTION:
                got = len(variants) if isinstance(variants, list) else type(variants).__name__
                raise VariantCountMismatch(
                    f"{path}: line {lineno} (clip {clip_id!r}): expected "
                    f"{VARIANTS_PER_CAPTION} variants, got {got}"
                )
            if not 0 <= caption_index < CAPTIONS_PER_CLIP:
                raise IngestError(
                    f"{path}: line {lineno}: caption_index {caption_index} outside 0..4"
                )
            key = (clip_id, caption_index)
            if key in seen:
                raise IngestError(
                    f"{path}: line {lineno}: duplicate (clip_id, caption_index) {key!r}"
                )
            seen.add(key)
            sets.append(AugmentedCaptionSet(clip_id, caption_index, tuple(str(v) for v in variants)))
    return sets


def read_wav(path) -> Waveform:
    """Decode a RIFF/WAVE file to a mono waveform in [-1, 1].

    Accepts 16-bit PCM and 32-bit IEEE float (plain or WAVE_FORMAT_EXTENSIBLE);
    multichannel input is averaged to mono. Integer samples are scaled by
    1/32768, the symmetric-range convention, so int16 -32768 maps to -1.0
    exactly.
    """
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise CorruptHeader(f"{path}: not a RIFF/WAVE file")

    fmt = None
    data = None
    pos = 12
    while pos + 8 <= len(raw):
        chunk_id = raw[pos : pos + 4]
        (size,) = struct.unpack_from("<I", raw, pos + 4)
        body = raw[pos + 8 : pos + 8 + size]
        if len(body) < size:
            raise CorruptHeader(f"{path}: truncated {chunk_id!r} chunk")
        if chunk_id == b"fmt ":
            fmt = body
        elif chunk_id == b"data":
            data = body
        pos += 8 + size + (size & 1)  # chunks are word-aligned

    if fmt is None:
        raise CorruptHeader(f"{path}: no fmt chunk")
    if data is None:
        raise CorruptHeader(f"{path}: no data chunk")
    if len(fmt) < 16:
        raise CorruptHeader(f"{path}: fmt chunk too small ({len(fmt)} bytes)")

    code, channels, rate, _byte_rate, _block_align, bits = struct.unpack_from("<HHIIHH", fmt, 0)
    if code == 0xFFFE:  # extensible: the real code sits in the sub-format GUID
        if len(fmt) < 26:
            raise CorruptHeader(f"{path}: extensible fmt chunk too small")
        (code,) = struct.unpack_from("<H", fmt, 24)
    if channels < 1 or rate < 1:
        raise CorruptHeader(f"{path}: invalid fmt fields (channels={channels}, rate={rate})")

    if code == 1 and bits == 16:
        dtype = np.dtype("<i2")
    elif code == 3 and bits == 32:
        dtype = np.dtype("<f4")
    else:
        raise UnsupportedEncoding(
            f"{path}: unsupported encoding (format code {code}, {bits}-bit); "
            "only 16-bit PCM and 32-bit IEEE float are handled"
        )

    frame_bytes = channels * bits // 8
    if len(data) % frame_bytes != 0:
        raise CorruptHeader(f"{path}: data size {len(data)} not a multiple of frame size {frame_bytes}")

    samples = np.frombuffer(data, dtype=dtype).astype(np.float64)
    if dtype.kind == "i":
        samples /= 32768.0
    if channels > 1:
        samples = samples.reshape(-1, channels).mean(axis=1)
    if samples.size and float(np.max(np.abs(samples))) > 1.0:
        samples = np.clip(samples, -1.0, 1.0)  # float files may carry headroom overshoot
    return Waveform(samples, int(rate))


def _atomic_write(path: Path, payload: bytes) -> None:
    tmp = path.parent / (path.name + f".tmp.{os.getpid()}")
    tmp.write_bytes(payload)
    os.replace(tmp, path)


def _validate_entries(entries) -> tuple[int, list[tuple[str, np.ndarray]]]:
    items = [(str(i), np.asarray(v)) for i, v in entries]
    if not items:
        raise IngestError("cannot write an empty embedding dump")
    dim = items[0][1].size
    seen: set[str] = set()
    checked = []
    for entry_id, vec in items:
        vec = np.asarray(vec, dtype="<f4").reshape(-1)
        if vec.size != dim:
            raise DimMismatch(f"entry {entry_id!r}: dim {vec.size} != {dim}")
        if not np.all(np.isfinite(vec)):
            raise DimMismatch(f"entry {entry_id!r}: vector contains non-finite values")
        if entry_id in seen:
            raise IngestError(f"duplicate entry id {entry_id!r}")
        seen.add(entry_id)
        checked.append((entry_id, vec))
    return dim, checked


def _pack_entries(entries: list[tuple[str, np.ndarray]]) -> bytearray:
    buf = bytearray()
    for entry_id, vec in entries:
        id_bytes = entry_id.encode("utf-8")
        if len(id_bytes) > 0xFFFF:
            raise IngestError(f"entry id too long ({len(id_bytes)} bytes)")
        buf += struct.pack("<H", len(id_bytes))
        buf += id_bytes
        buf += vec.tobytes()
    return buf


def write_embedding_dump(entries, path) -> None:
    """Write (id, vector) pairs in the binary dump format, atomically."""
    path = Path(path)
    dim, checked = _validate_entries(entries)
    buf = bytearray(_HEADER.pack(DUMP_MAGIC, _DUMP_VERSION, dim, len(checked)))
    buf += _pack_entries(checked)
    _atomic_write(path, bytes(buf))


class _Cursor:
    """Sequential reader with truncation checks."""

    def __init__(self, raw: bytes, path: Path):
        self.raw = raw
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.raw):
            raise TruncatedFile(f"{self.path}: expected {n} more bytes at offset {self.pos}")
        out = self.raw[self.pos : self.pos + n]
        self.pos += n
        return out

    def u16(self) -> int:
        return struct.unpack("<H", self.take(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def _read_container(path, expected_version: int):
    path = Path(path)
    cur = _Cursor(path.read_bytes(), path)
    magic, version, dim, count = _HEADER.unpack(cur.take(_HEADER.size))
    if magic != DUMP_MAGIC:
        raise BadMagic(f"{path}: bad magic {magic!r}")
    if version != expected_version:
        raise CorruptHeader(f"{path}: version {version}, expected {expected_version}")
    if dim == 0:
        raise CorruptHeader(f"{path}: zero dimension")
    return cur, dim, count


def _read_entries(cur: _Cursor, dim: int, count: int) -> list[tuple[str, np.ndarray]]:
    entries = []
    seen: set[str] = set()
    for _ in range(count):
        id_len = cur.u16()
        try:
            entry_id = cur.take(id_len).decode("utf-8")
        except UnicodeDecodeError:
            raise CorruptHeader(f"{cur.path}: entry id is not valid UTF-8") from None
        vec = np.frombuffer(cur.take(dim * 4), dtype="<f4").copy()
        if not np.all(np.isfinite(vec)):
            raise DimMismatch(f"{cur.path}: entry {entry_id!r} contains non-finite values")
        if entry_id in seen:
            raise IngestError(f"{cur.path}: duplicate entry id {entry_id!r}")
        seen.add(entry_id)
        entries.append((entry_id, vec))
    if cur.pos != len(cur.raw):
        raise CorruptHeader(f"{cur.path}: {len(cur.raw) - cur.pos} trailing bytes")
    return entries


def read_embedding_dump(path) -> EmbeddingDump:
    """Read a dump written by write_embedding_dump; bit-exact round trip."""
    cur, dim, count = _read_container(path, _DUMP_VERSION)
    return EmbeddingDump(dim=dim, entries=tuple(_read_entries(cur, dim, count)))


def write_spectrogram_cache(entries: Sequence[tuple[str, Spectrogram]], path) -> None:
    """Cache spectrograms in the dump container (version 2, extra frames field).

    All entries must share one frame count; each vector is the row-major
    flattened (frames, 128) matrix.
    """
    path = Path(path)
    items = list(entries)
    if not items:
        raise IngestError("cannot write an empty spectrogram cache")
    frames = items[0][1].frames
    flat = []
    for entry_id, spec in items:
        if spec.frames != frames:
            raise DimMismatch(f"entry {entry_id!r}: frames {spec.frames} != {frames}")
        flat.append((entry_id, spec.values.reshape(-1)))
    dim, checked = _validate_entries(flat)
    buf = bytearray(_HEADER.pack(DUMP_MAGIC, _CACHE_VERSION, dim, len(checked)))
    buf += struct.pack("<I", frames)
    buf += _pack_entries(checked)
    _atomic_write(path, bytes(buf))


def read_spectrogram_cache(path) -> list[tuple[str, Spectrogram]]:
    cur, dim, count = _read_container(path, _CACHE_VERSION)
    frames = cur.u32()
    if frames == 0 or dim != frames * 128:
        raise CorruptHeader(f"{path}: dim {dim} inconsistent with frames {frames}")
    entries = _read_entries(cur, dim, count)
    return [(entry_id, Spectrogram(vec.astype(np.float64).reshape(frames, 128))) for entry_id, vec in entries]
