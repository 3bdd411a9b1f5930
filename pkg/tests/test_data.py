import logging
import shutil

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bcastnet.audio import AudioClip, DspConfig, read_melf, write_wav
from bcastnet.data import (
    REFERENCE_COUNTS,
    DatasetError,
    DatasetManifest,
    IndexSet,
    batch_iter,
    build_features,
    cache_key,
    class_distribution,
    fit_length,
    modal_frames,
    scan_dataset,
)

_TINY = AudioClip(np.zeros(4), 22050)


def _tree(root, counts, dirname=lambda g: g):
    for genre, n in counts.items():
        d = root / dirname(genre)
        d.mkdir(parents=True, exist_ok=True)
        for i in range(n):
            write_wav(d / f"{i:05d}.wav", _TINY)
    return root


def test_scan_gtzan_layout(tmp_path):
    m = scan_dataset(_tree(tmp_path, REFERENCE_COUNTS["gtzan"]), "gtzan")
    assert len(m.entries) == 1000 and m.num_classes == 10
    assert set(class_distribution(m).values()) == {100}
    assert sorted(m.label_map.values()) == list(range(10))


def test_scan_homburg_via_relabel_csv(tmp_path):
    counts = REFERENCE_COUNTS["homburg"]
    safe = lambda g: g.replace("/", "_")
    _tree(tmp_path, counts, safe)
    csv_path = tmp_path / "labels.csv"
    rows = ["path,label"] + [f"{safe(g)}/{i:05d}.wav,{g}" for g, n in counts.items() for i in range(n)]
    csv_path.write_text("\n".join(rows) + "\n")
    m = scan_dataset(tmp_path, "homburg", relabel_csv=csv_path)
    dist = class_distribution(m)
    assert len(dist) == 9 and len(m.entries) == 1886
    assert dist["Rock"] == 504 and dist["Funk/Soul"] == 47


def test_scan_extended_ballroom_layout(tmp_path):
    m = scan_dataset(_tree(tmp_path, REFERENCE_COUNTS["extended_ballroom"]), "extended_ballroom")
    dist = class_distribution(m)
    assert len(dist) == 13 and sum(dist.values()) == 4180 and dist["Weswing"] == 23


def test_scan_fma_small_layout(tmp_path):
    m = scan_dataset(_tree(tmp_path, REFERENCE_COUNTS["fma_small"]), "fma_small")
    assert m.num_classes == 8 and len(m.entries) == 8000
    assert set(class_distribution(m).values()) == {1000}


def test_empty_genre_warns(tmp_path, caplog):
    _tree(tmp_path, {"Jazz": 2})
    (tmp_path / "Blues").mkdir()
    with caplog.at_level(logging.WARNING, logger="bcastnet.data"):
        m = scan_dataset(tmp_path, "gtzan")
    assert "Blues" in caplog.text
    assert m.label_map == {"Jazz": 0}


def test_no_usable_files_is_an_error(tmp_path):
    (tmp_path / "Jazz").mkdir()
    (tmp_path / "Jazz" / "a.mp3").write_bytes(b"ID3")
    with pytest.raises(DatasetError, match="no usable"):
        scan_dataset(tmp_path, "gtzan")
    with pytest.raises(DatasetError, match="does not exist"):
        scan_dataset(tmp_path / "missing", "gtzan")


def test_empty_manifest_distribution():
    assert class_distribution(DatasetManifest("gtzan", ".", [], {})) == {}


def test_scan_independent_of_creation_order(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for root, order in ((a, range(6)), (b, reversed(range(6)))):
        for i in order:
            d = root / ("Rock" if i % 2 else "Jazz")
            d.mkdir(parents=True, exist_ok=True)
            write_wav(d / f"t{i}.wav", _TINY)
    ma, mb = scan_dataset(a, "gtzan"), scan_dataset(b, "gtzan")
    assert ma.entries == mb.entries and ma.label_map == mb.label_map
    assert [e.path for e in ma.entries] == sorted(e.path for e in ma.entries)


def test_manifest_json_round_trip(micro):
    manifest, _ = micro
    assert DatasetManifest.from_dict(manifest.to_dict()) == manifest


# ------------------------------------------------------------------ cache


def test_cache_idempotent(micro, tmp_path):
    manifest, cache = micro
    shutil.copytree(cache.dir, tmp_path / "c")
    again, summary = build_features(manifest, DspConfig(), tmp_path / "c")
    assert summary.converted == 0 and summary.cached == len(manifest.entries)
    assert str(summary).startswith("0 converted")
    first = manifest.entries[0].path
    assert np.array_equal(again.load(first), cache.load(first))


def test_cache_files_match_index(micro):
    manifest, cache = micro
    files = {p.stem for p in cache.dir.glob("*.melf")}
    assert files == {cache.key_for(e.path) for e in manifest.entries}
    spec = read_melf(cache.dir / f"{cache.key_for(manifest.entries[0].path)}.melf")
    assert spec.values.shape == (1 + 44100 // 1024, 128)


def test_undecodable_file_recorded_not_fatal(tmp_path):
    root = _tree(tmp_path / "audio", {"Jazz": 1})
    (root / "Jazz" / "broken.wav").write_bytes(b"RIFF0000WAVEjunk")
    m = scan_dataset(root, "gtzan")
    _, summary = build_features(m, DspConfig(), tmp_path / "cache")
    assert len(summary.failed) == 2  # the 4-sample clip is too short as well
    assert {p for p, _ in summary.failed} == {"Jazz/00000.wav", "Jazz/broken.wav"}


def test_cache_key_tracks_config_and_bytes():
    cfg = DspConfig()
    base = cache_key(b"abc", cfg)
    assert base == cache_key(b"abc", DspConfig())
    assert base != cache_key(b"abd", cfg)
    assert base != cache_key(b"abc", DspConfig(n_mels=64))


@settings(max_examples=20)
@given(st.binary(max_size=64), st.binary(max_size=64))
def test_cache_key_changes_iff_bytes_change(a, b):
    assert (cache_key(a, DspConfig()) == cache_key(b, DspConfig())) == (a == b)


def test_homburg_clip_gives_216_frames(tmp_path):
    t = np.arange(220500) / 22050
    d = tmp_path / "audio" / "Rock"
    d.mkdir(parents=True)
    write_wav(d / "x.wav", AudioClip(0.5 * np.sin(2 * np.pi * 440 * t), 22050))
    m = scan_dataset(tmp_path / "audio", "homburg")
    cache, summary = build_features(m, DspConfig(), tmp_path / "cache")
    assert summary.converted == 1
    assert cache.load("Rock/x.wav").shape == (216, 128)


# --------------------------------------------------------------- batching


def _fake_cache(tmp_path, n, frames=20):
    """Manifest and cache of ``n`` entries without going through audio."""
    from bcastnet.audio import MelSpectrogram, write_melf
    from bcastnet.data import FeatureCache, ManifestEntry

    cache = FeatureCache(tmp_path)
    cache.dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(0)
    entries = []
    for i in range(n):
        rel = f"g{i % 3}/{i}.wav"
        key = f"{i:064x}"
        write_melf(cache.dir / f"{key}.melf",
                   MelSpectrogram(rng.normal(size=(frames, 128)).astype(np.float32), DspConfig()))
        cache.index["entries"][rel] = {"key": key, "frames": frames, "mels": 128}
        entries.append(ManifestEntry(rel, f"g{i % 3}", 1.0))
    return DatasetManifest("gtzan", str(tmp_path), entries, {"g0": 0, "g1": 1, "g2": 2}), cache


def test_batches_of_eight_keep_partial(tmp_path):
    m, cache = _fake_cache(tmp_path, 100)
    batches = list(batch_iter(cache, m, IndexSet(tuple(range(100)), "train"), 8))
    assert len(batches) == 13 and len(batches[-1][0]) == 4
    x, y = batches[0]
    assert x.shape == (8, 1, 128, 20) and x.dtype == np.float32
    assert np.all(y.sum(axis=1) == 1) and set(np.unique(y)) == {0.0, 1.0}
    assert list(y.argmax(axis=1)) == [i % 3 for i in range(8)]


def test_batches_standardized_per_spectrogram(tmp_path):
    m, cache = _fake_cache(tmp_path, 4)
    x, _ = next(batch_iter(cache, m, IndexSet((0, 1, 2, 3), "eval"), 4))
    assert np.allclose(x.mean(axis=(1, 2, 3)), 0, atol=1e-5)
    assert np.allclose(x.std(axis=(1, 2, 3)), 1, atol=1e-4)


def test_same_seed_same_order(tmp_path):
    m, cache = _fake_cache(tmp_path, 30)
    idx = IndexSet(tuple(range(30)), "train")
    order = lambda s: np.concatenate([x for x, _ in batch_iter(cache, m, idx, 8, shuffle_seed=s)])
    assert np.array_equal(order(5), order(5))
    assert not np.array_equal(order(5), order(6))


def test_index_out_of_range(tmp_path):
    m, cache = _fake_cache(tmp_path, 5)
    with pytest.raises(IndexError):
        next(batch_iter(cache, m, IndexSet((0, 5), "eval")))


def test_unknown_pad_policy(tmp_path):
    m, cache = _fake_cache(tmp_path, 2)
    with pytest.raises(ValueError):
        next(batch_iter(cache, m, IndexSet((0,), "eval"), pad_policy="reflect"))


def test_modal_frames_prefers_longest_on_tie(tmp_path):
    m, cache = _fake_cache(tmp_path, 4)
    for i, e in enumerate(m.entries):
        cache.index["entries"][e.path]["frames"] = 10 if i < 2 else 12
    assert modal_frames(cache, m) == 12
    cache.index["entries"][m.entries[3].path]["frames"] = 10
    assert modal_frames(cache, m) == 10


def test_fit_length_examples():
    v = np.arange(10, dtype=float)[:, None]
    assert list(fit_length(v, 6)[:, 0]) == [2, 3, 4, 5, 6, 7]
    padded = fit_length(v, 12)[:, 0]
    assert list(padded[:10]) == list(range(10)) and list(padded[10:]) == [0, 0]
    assert fit_length(v, 10) is v


@given(st.integers(1, 40), st.integers(1, 40))
def test_fit_length_shape(t, n):
    assert fit_length(np.ones((t, 3)), n).shape == (n, 3)
