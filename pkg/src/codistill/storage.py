"""Manifest TSV, integer-sequence files and 16-bit WAV I/O."""

from __future__ import annotations

import csv
import os
import wave
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from .autodiff import load_tensor, save_tensor
from .errors import FormatError, ManifestError

MANIFEST_COLUMNS = ("utt_id", "frames_path", "phones_path", "codes_path", "wav_path")


@dataclass(frozen=True)
class ManifestRow:
    utt_id: str
    frames_path: str
    phones_path: str
    codes_path: str = ""
    wav_path: str = ""


@dataclass
class Manifest:
    rows: list[ManifestRow]
    root: Path  # relative paths resolve against this directory

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def __len__(self) -> int:
        return len(self.rows)

    def __iter__(self):
        return iter(self.rows)

    def load_frames(self, row: ManifestRow) -> np.ndarray:
        return load_tensor(self._existing(row, "frames_path"))

    def load_phones(self, row: ManifestRow) -> np.ndarray:
        return read_ints(self._existing(row, "phones_path"))

    def load_codes(self, row: ManifestRow) -> np.ndarray:
        if not row.codes_path:
            raise ManifestError(f"{row.utt_id}: no codes_path in manifest")
        return read_ints(self._existing(row, "codes_path"))

    def has_codes(self) -> bool:
        return all(r.codes_path for r in self.rows)

    def with_codes(self, codes_paths: dict[str, str]) -> "Manifest":
        return Manifest([replace(r, codes_path=codes_paths[r.utt_id]) for r in self.rows], self.root)

    def _existing(self, row: ManifestRow, column: str) -> Path:
        path = self.resolve(getattr(row, column))
        if not path.is_file():
            raise ManifestError(f"{row.utt_id}: {column} {path} does not exist")
        return path


def read_manifest(path: str | Path) -> Manifest:
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"manifest {path} does not exist")
    with open(path, newline="") as fh:
        reader = csv.reader(fh, delimiter="\t")
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestError(f"manifest {path} is empty") from None
        missing = [c for c in MANIFEST_COLUMNS[:3] if c not in header]
        if missing:
            raise ManifestError(f"manifest {path} lacks columns {missing}")
        known = {f.name for f in fields(ManifestRow)}
        rows, seen = [], set()
        for lineno, values in enumerate(reader, 2):
            if not values:
                continue
            if len(values) != len(header):
                raise ManifestError(f"{path}:{lineno}: expected {len(header)} columns, got {len(values)}")
            rec = {k: v for k, v in zip(header, values) if k in known}
            if rec["utt_id"] in seen:
                raise ManifestError(f"{path}:{lineno}: duplicate utt_id {rec['utt_id']!r}")
            seen.add(rec["utt_id"])
            rows.append(ManifestRow(**rec))
    return Manifest(rows, path.parent)


def write_manifest(path: str | Path, manifest: Manifest) -> None:
    """Write with paths relative to the new manifest's directory where possible."""
    path = Path(path)
    base = path.parent.resolve()

    def rel(p: str) -> str:
        if not p:
            return ""
        return os.path.relpath(manifest.resolve(p).resolve(), base)

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(MANIFEST_COLUMNS)
        for r in manifest.rows:
            writer.writerow([r.utt_id] + [rel(getattr(r, c)) for c in MANIFEST_COLUMNS[1:]])


def write_ints(path: str | Path, values) -> None:
    Path(path).write_text("".join(f"{int(v)}\n" for v in values))


def read_ints(path: str | Path) -> np.ndarray:
    text = Path(path).read_text().split()
    try:
        return np.array([int(v) for v in text], dtype=np.int64)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None


def write_wav(path: str | Path, samples: np.ndarray, sample_rate: int) -> None:
    pcm = np.clip(np.round(np.asarray(samples) * 32767), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(pcm.tobytes())


def read_wav(path: str | Path) -> tuple[np.ndarray, int]:
    with wave.open(str(path), "rb") as w:
        if w.getnchannels() != 1 or w.getsampwidth() != 2:
            raise FormatError(f"{path}: expected 16-bit mono WAV")
        rate = w.getframerate()
        pcm = np.frombuffer(w.readframes(w.getnframes()), dtype="<i2")
    return pcm.astype(np.float64) / 32767, rate


def write_corpus(out_dir: str | Path, utterances) -> Manifest:
    """Persist utterances (frames as TNSR, phones as ints, optional WAV) plus manifest.tsv."""
    out_dir = Path(out_dir)
    for sub in ("frames", "phones", "wav"):
        (out_dir / sub).mkdir(parents=True, exist_ok=True)
    rows = []
    for utt in utterances:
        frames_rel = f"frames/{utt.utt_id}.tnsr"
        phones_rel = f"phones/{utt.utt_id}.txt"
        save_tensor(out_dir / frames_rel, utt.frames)
        write_ints(out_dir / phones_rel, utt.phones)
        wav_rel = ""
        if utt.waveform is not None:
            wav_rel = f"wav/{utt.utt_id}.wav"
            write_wav(out_dir / wav_rel, utt.waveform, utt.sample_rate)
        rows.append(ManifestRow(utt.utt_id, frames_rel, phones_rel, "", wav_rel))
    if not any(r.wav_path for r in rows):
        (out_dir / "wav").rmdir()
    manifest = Manifest(rows, out_dir)
    write_manifest(out_dir / "manifest.tsv", manifest)
    return manifest
