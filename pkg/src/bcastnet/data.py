"""Dataset manifests, the MELF feature cache, and batch iteration."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import os
from collections import Counter
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional, Sequence, Union

import numpy as np

from .audio import (
    AudioClip,
    DspConfig,
    preprocess_clip,
    read_melf,
    standardize,
    wav_info,
    write_melf,
    write_wav,
    decode_wav,
)

log = logging.getLogger(__name__)

DATASET_IDS = ("gtzan", "homburg", "extended_ballroom", "fma_small")

# per-genre track counts of the pristine corpora
REFERENCE_COUNTS = {
    "gtzan": {g: 100 for g in ("Classic", "Jazz", "Blues", "Metal", "Pop", "Rock",
                                "Country", "Disco", "Hiphop", "Raggae")},
    "homburg": {"Electronic": 113, "Jazz": 319, "Blues": 120, "Funk/Soul": 47, "Pop": 116,
                "Rock": 504, "Country": 222, "Alternative": 145, "Hiphop": 300},
    "extended_ballroom": {"Cha Cha": 455, "Jive": 350, "Quickstep": 497, "Rumba": 470,
                          "Samba": 468, "Tango": 464, "Viennese Waltz": 252, "Waltz": 529,
                          "Foxtrot": 507, "Pasodoble": 53, "Salsa": 47, "Slow Waltz": 65,
                          "Weswing": 23},
    "fma_small": {g: 1000 for g in ("Rock", "International", "Folk", "Experimental",
                                     "Instrumental", "Pop", "Hip-Hop", "Electronic")},
}

AUDIO_EXTENSIONS = {".wav"}
CONVERT_EXTENSIONS = {".mp3", ".au", ".flac", ".ogg"}
INDEX_NAME = "index.json"


class DatasetError(ValueError):
    pass


class SplitLeakError(RuntimeError):
    """A test-tagged index set was used to build a training iterator."""


@dataclass(frozen=True)
class ManifestEntry:
    path: str  # POSIX path relative to the dataset root
    label: str
    duration: float


@dataclass
class DatasetManifest:
    dataset_id: str
    root: str
    entries: list
    label_map: dict  # genre -> class index, contiguous from 0

    @property
    def num_classes(self) -> int:
        return len(self.label_map)

    @property
    def labels(self) -> np.ndarray:
        return np.array([self.label_map[e.label] for e in self.entries], dtype=np.int64)

    @property
    def label_names(self) -> list:
        return sorted(self.label_map, key=self.label_map.get)

    def to_dict(self) -> dict:
        return {"dataset_id": self.dataset_id, "root": self.root,
                "label_map": self.label_map,
                "entries": [[e.path, e.label, e.duration] for e in self.entries]}

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        return cls(d["dataset_id"], d["root"], [ManifestEntry(*e) for e in d["entries"]],
                   dict(d["label_map"]))


def _duration(path: Path) -> float:
    try:
        rate, frames = wav_info(path)
        return frames / rate
    except (ValueError, OSError) as exc:
        log.warning("cannot read WAV header of %s: %s", path, exc)
        return float("nan")


def scan_dataset(root: Union[str, Path], dataset_id: str,
                 relabel_csv: Optional[Union[str, Path]] = None) -> DatasetManifest:
    """Scan genre-named subdirectories of WAV files (or a ``path,label`` CSV).

    Ordering is lexicographic by genre then path, regardless of filesystem
    enumeration order.
    """
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"dataset root {root} does not exist")
    pairs = []
    if relabel_csv is not None:
        with open(relabel_csv, newline="", encoding="utf-8") as fh:
            for row in csv.reader(fh):
                if not row or row[0].startswith("#") or row[:2] == ["path", "label"]:
                    continue
                rel, label = row[0].strip(), row[1].strip()
                if (root / rel).is_file():
                    pairs.append((label, rel))
                else:
                    log.warning("relabel entry %s not found under %s", rel, root)
    else:
        for genre_dir in sorted(p for p in root.iterdir() if p.is_dir()):
            files = sorted(p for p in genre_dir.rglob("*") if p.is_file())
            usable = [p for p in files if p.suffix.lower() in AUDIO_EXTENSIONS]
            skipped = [p for p in files if p.suffix.lower() in CONVERT_EXTENSIONS]
            if skipped:
                log.warning("%s: %d non-WAV audio files skipped; convert them to WAV externally",
                            genre_dir.name, len(skipped))
            if not usable:
                log.warning("genre directory %s has no usable audio", genre_dir.name)
                continue
            pairs += [(genre_dir.name, p.relative_to(root).as_posix()) for p in usable]
    if not pairs:
        raise DatasetError(f"no usable audio files under {root}")
    pairs.sort()
    paths = [p for _, p in pairs]
    if len(set(paths)) != len(paths):
        raise DatasetError("duplicate paths in dataset")
    genres = sorted({g for g, _ in pairs})
    entries = [ManifestEntry(p, g, _duration(root / p)) for g, p in pairs]
    return DatasetManifest(dataset_id, str(root), entries, {g: i for i, g in enumerate(genres)})


def class_distribution(manifest: DatasetManifest) -> dict:
    """Genre -> track count, in class-index order."""
    counts = Counter(e.label for e in manifest.entries)
    return {g: counts[g] for g in manifest.label_names if counts[g]}


# ---------------------------------------------------------- feature cache


def cache_key(source: bytes, config: DspConfig) -> str:
    h = hashlib.sha256()
    h.update(hashlib.sha256(source).digest())
    h.update(config.to_json().encode("utf-8"))
    return h.hexdigest()


@dataclass
class BuildSummary:
    converted: int = 0
    cached: int = 0
    failed: list = field(default_factory=list)  # (path, reason)

    def __str__(self):
        return f"{self.converted} converted, {self.cached} cached, {len(self.failed)} failed"


class FeatureCache:
    """Directory of ``<key>.melf`` files plus ``index.json`` mapping source paths to keys."""

    def __init__(self, directory: Union[str, Path], config: DspConfig = DspConfig()):
        self.dir = Path(directory)
        self.config = config
        self.index = {"version": 1, "config": json.loads(config.to_json()), "entries": {}}
        self._memo: dict = {}
        path = self.dir / INDEX_NAME
        if path.exists():
            stored = json.loads(path.read_text())
            if stored.get("config") == self.index["config"]:
                self.index = stored

    def key_for(self, rel_path: str) -> Optional[str]:
        entry = self.index["entries"].get(rel_path)
        return entry["key"] if entry else None

    def frames(self, rel_path: str) -> Optional[int]:
        entry = self.index["entries"].get(rel_path)
        return entry["frames"] if entry else None

    def save_index(self) -> None:
        self.dir.mkdir(parents=True, exist_ok=True)
        tmp = self.dir / (INDEX_NAME + ".tmp")
        tmp.write_text(json.dumps(self.index, indent=1, sort_keys=True))
        os.replace(tmp, self.dir / INDEX_NAME)

    def load(self, rel_path: str) -> np.ndarray:
        """dB spectrogram (frames x mels) for a manifest path."""
        key = self.key_for(rel_path)
        if key is None:
            raise KeyError(f"no cached features for {rel_path}")
        if key not in self._memo:
            self._memo[key] = read_melf(self.dir / f"{key}.melf").values
        return self._memo[key]


def _convert(job):
    src, dst, config = job
    try:
        spec = preprocess_clip(decode_wav(Path(src).read_bytes()), config)
        tmp = Path(str(dst) + ".tmp")
        write_melf(tmp, spec)
        os.replace(tmp, dst)
        return spec.values.shape, None
    except Exception as exc:  # recorded per file, never fatal
        return None, f"{type(exc).__name__}: {exc}"


def build_features(manifest: DatasetManifest, dsp_config: DspConfig, cache_dir: Union[str, Path],
                   workers: int = 1) -> tuple[FeatureCache, BuildSummary]:
    """Materialize one MELF file per manifest entry; already-cached entries are skipped."""
    cache = FeatureCache(cache_dir, dsp_config)
    cache.dir.mkdir(parents=True, exist_ok=True)
    summary = BuildSummary()
    root = Path(manifest.root)
    jobs = []
    for e in manifest.entries:
        src = root / e.path
        try:
            key = cache_key(src.read_bytes(), dsp_config)
        except OSError as exc:
            summary.failed.append((e.path, str(exc)))
            continue
        dst = cache.dir / f"{key}.melf"
        known = cache.index["entries"].get(e.path)
        if dst.exists() and known and known["key"] == key:
            summary.cached += 1
            continue
        jobs.append((e.path, key, (str(src), str(dst), dsp_config)))
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_convert, [j[2] for j in jobs], chunksize=4))
    else:
        results = [_convert(j[2]) for j in jobs]
    for (rel, key, _), (shape, err) in zip(jobs, results):
        if err is not None:
            summary.failed.append((rel, err))
            log.warning("skipping %s: %s", rel, err)
            continue
        cache.index["entries"][rel] = {"key": key, "frames": int(shape[0]), "mels": int(shape[1])}
        summary.converted += 1
    cache.save_index()
    return cache, summary


# ---------------------------------------------------------------- batching


@dataclass(frozen=True)
class IndexSet:
    """Sample indices tagged with the split they belong to."""
    indices: tuple
    tag: str  # "train" | "val" | "test" | "all"

    def __len__(self):
        return len(self.indices)


def modal_frames(cache: FeatureCache, manifest: DatasetManifest) -> int:
    counts = Counter(cache.frames(e.path) for e in manifest.entries if cache.frames(e.path))
    if not counts:
        raise DatasetError("no cached features for this manifest")
    best = max(counts.values())
    return max(n for n, c in counts.items() if c == best)


def fit_length(values: np.ndarray, length: int) -> np.ndarray:
    """Center-crop or zero-pad (at the end) a frames x mels matrix to ``length`` frames."""
    t = values.shape[0]
    if t > length:
        start = (t - length) // 2
        return values[start:start + length]
    if t < length:
        return np.pad(values, ((0, length - t), (0, 0)))
    return values


def batch_iter(cache: FeatureCache, manifest: DatasetManifest, index_set: IndexSet,
               batch: int = 8, shuffle_seed: Optional[int] = None,
               pad_policy: Union[str, int] = "modal", purpose: str = "eval",
               standardized: bool = True) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield ``(x, one_hot)`` with ``x`` shaped ``[B, 1, n_mels, frames]`` (float32).

    Each spectrogram is standardized, then fitted to a common length.  The
    final partial batch is kept.
    """
    if purpose == "train" and index_set.tag == "test":
        raise SplitLeakError("refusing to train on a test-tagged index set")
    n = len(manifest.entries)
    idx = np.asarray(index_set.indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"index out of range for a manifest of {n} entries")
    if shuffle_seed is not None:
        idx = np.random.default_rng(shuffle_seed).permutation(idx)
    if pad_policy == "modal":
        length = modal_frames(cache, manifest)
    elif isinstance(pad_policy, int):
        length = pad_policy
    else:
        raise ValueError(f"unknown pad policy {pad_policy!r}")
    labels = manifest.labels
    k = manifest.num_classes
    for start in range(0, len(idx), batch):
        chunk = idx[start:start + batch]
        xs = []
        for i in chunk:
            v = cache.load(manifest.entries[i].path)
            if standardized:
                v = standardize(v)
            xs.append(fit_length(v, length).T)
        x = np.stack(xs)[:, None].astype(np.float32)
        y = np.zeros((len(chunk), k), dtype=np.float32)
        y[np.arange(len(chunk)), labels[chunk]] = 1.0
        yield x, y


# ----------------------------------------------------------- micro corpus


def make_micro_dataset(root: Union[str, Path], classes: int = 2, clips_per_class: int = 8,
                       seconds: float = 2.0, sample_rate: int = 22050, seed: int = 0) -> Path:
    """Write a small synthetic corpus: one tone family per class, genre-folder layout.

    Class ``c`` is a harmonic tone near ``220 * 2**c`` Hz with an amplitude
    pulse whose rate also depends on ``c``; clips differ by jitter and noise.
    """
    root = Path(root)
    rng = np.random.default_rng(seed)
    t = np.arange(int(seconds * sample_rate)) / sample_rate
    for c in range(classes):
        d = root / f"class{c}"
        d.mkdir(parents=True, exist_ok=True)
        for j in range(clips_per_class):
            f0 = 220.0 * 2 ** c * (1 + 0.02 * rng.standard_normal())
            phase = rng.uniform(0, 2 * np.pi)
            tone = sum(np.sin(2 * np.pi * f0 * h * t + phase) / h for h in (1, 2, 3))
            pulse = 0.6 + 0.4 * np.sin(2 * np.pi * (2 + 3 * c) * t)
            x = 0.3 * tone * pulse + 0.02 * rng.standard_normal(len(t))
            write_wav(d / f"clip{j:02d}.wav", AudioClip(x / max(1.0, np.abs(x).max()), sample_rate))
    return root
