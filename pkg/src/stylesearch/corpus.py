"""Audio ingestion, mel features, and the synthetic labeled corpus.

Real audio enters through ``load_wav`` (mono PCM16 or float32 RIFF/WAVE,
any rate, resampled to 16 kHz by linear interpolation).  ``synth_corpus``
generates a desk-scale expressive corpus: each style owns a smooth
spectral prototype and a temporal modulation pattern, utterances are
prototype + within-style noise scaled by (1 - separability), rendered to
waveforms as spectrally shaped noise.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _accel

SAMPLE_RATE = 16000

DEFAULT_STYLE_NAMES = (
    "angry", "awe", "bored", "calm", "confused", "desire", "disgusted",
    "enunciated", "excited", "fast", "fearful", "frustrated", "happy",
    "laughing", "neutral", "projected", "sad", "sarcastic", "sleepy",
    "surprised", "sympathetic", "whispered",
)


class WavFormatError(ValueError):
    """Not a RIFF/WAVE file we can parse, or an unsupported encoding."""


class UnsupportedChannelsError(ValueError):
    """WAV file has more than one channel."""


class TooShortError(ValueError):
    """Utterance shorter than one analysis window."""


class StratificationError(ValueError):
    """A style has too few utterances to split across train/val/test."""


# ---------------------------------------------------------------------------
# Types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Utterance:
    """One mono 16 kHz clip."""

    id: str
    samples: np.ndarray  # float32 in [-1, 1]
    style: int | None = None

    @property
    def duration_s(self) -> float:
        return self.samples.shape[0] / SAMPLE_RATE


@dataclass(frozen=True)
class FeatureSequence:
    frames: np.ndarray  # (T, n_mels) float64 log-mel energies
    frame_hop_s: float


@dataclass(frozen=True)
class StyleRegistry:
    """Ordered style names with name <-> integer id lookup."""

    names: tuple[str, ...] = DEFAULT_STYLE_NAMES

    def __post_init__(self):
        if len(set(self.names)) != len(self.names):
            raise ValueError("style names must be unique")
        if any(n != n.lower() for n in self.names):
            raise ValueError("style names must be lowercase")

    def __len__(self) -> int:
        return len(self.names)

    def __iter__(self):
        return iter(self.names)

    def id_of(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(f"unknown style {name!r}") from None

    def name_of(self, style_id: int) -> str:
        return self.names[style_id]


@dataclass(frozen=True)
class Corpus:
    utterances: tuple[Utterance, ...]
    registry: StyleRegistry

    def __len__(self) -> int:
        return len(self.utterances)

    def by_style(self) -> dict[int, list[Utterance]]:
        groups: dict[int, list[Utterance]] = {}
        for u in self.utterances:
            groups.setdefault(u.style, []).append(u)
        return groups

    def ids(self) -> set[str]:
        return {u.id for u in self.utterances}


@dataclass(frozen=True)
class SyntheticCorpusSpec:
    styles: StyleRegistry = field(default_factory=StyleRegistry)
    utterances_per_style: int = 60
    duration_range_s: tuple[float, float] = (1.0, 12.0)
    separability: float = 0.9
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.duration_range_s
        if not (0.5 <= lo <= hi <= 12.0):
            raise ValueError("duration range must satisfy 0.5 <= min <= max <= 12")
        if not (0.0 < self.separability <= 1.0):
            raise ValueError("separability must lie in (0, 1]")
        if self.utterances_per_style < 1:
            raise ValueError("need at least one utterance per style")


# ---------------------------------------------------------------------------
# WAV ingestion
# ---------------------------------------------------------------------------

def _parse_wav(data: bytes):
    if len(data) < 12 or data[:4] != b"RIFF" or data[8:12] != b"WAVE":
        raise WavFormatError("not a RIFF/WAVE file")
    fmt = None
    payload = None
    pos = 12
    while pos + 8 <= len(data):
        chunk_id = data[pos:pos + 4]
        (size,) = struct.unpack_from("<I", data, pos + 4)
        body = data[pos + 8:pos + 8 + size]
        if chunk_id == b"fmt ":
            if size < 16 or len(body) < 16:
                raise WavFormatError("fmt chunk too small")
            fmt = struct.unpack_from("<HHIIHH", body, 0)
        elif chunk_id == b"data":
            if len(body) < size:
                raise WavFormatError("data chunk truncated")
            payload = body
        pos += 8 + size + (size & 1)  # chunks are word-aligned
    if fmt is None or payload is None:
        raise WavFormatError("missing fmt or data chunk")
    return fmt, payload


def resample_linear(x: np.ndarray, src_rate: int, dst_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Linear-interpolation resampling; output length rounds n * dst/src."""
    if src_rate == dst_rate:
        return x
    n_out = int(round(x.shape[0] * dst_rate / src_rate))
    positions = np.arange(n_out, dtype=np.float64) * (src_rate / dst_rate)
    return np.interp(positions, np.arange(x.shape[0], dtype=np.float64), x)


def load_wav(path: str | Path) -> Utterance:
    """Read a mono PCM16 or float32 WAV at any rate into a 16 kHz Utterance."""
    path = Path(path)
    (audio_format, channels, rate, _byte_rate, _block_align, bits), payload = _parse_wav(
        path.read_bytes()
    )
    if channels != 1:
        raise UnsupportedChannelsError(f"{path.name}: {channels} channels, expected mono")
    if audio_format == 1 and bits == 16:
        samples = np.frombuffer(payload, dtype="<i2").astype(np.float64) / 32768.0
    elif audio_format == 3 and bits == 32:
        samples = np.frombuffer(payload, dtype="<f4").astype(np.float64)
    else:
        raise WavFormatError(f"{path.name}: unsupported encoding (format={audio_format}, bits={bits})")
    if samples.size == 0:
        raise WavFormatError(f"{path.name}: empty data chunk")
    samples = resample_linear(samples, rate)
    return Utterance(id=path.stem, samples=samples.astype(np.float32))


def save_wav(path: str | Path, samples: np.ndarray, rate: int = SAMPLE_RATE) -> None:
    """Write float samples in [-1, 1] as mono PCM16."""
    scaled = np.asarray(samples, dtype=np.float64) * 32768.0
    pcm = np.clip(np.round(scaled), -32768, 32767).astype("<i2")
    body = pcm.tobytes()
    header = b"RIFF" + struct.pack("<I", 36 + len(body)) + b"WAVE"
    header += b"fmt " + struct.pack("<IHHIIHH", 16, 1, 1, rate, rate * 2, 2, 16)
    header += b"data" + struct.pack("<I", len(body))
    Path(path).write_bytes(header + body)


# ---------------------------------------------------------------------------
# Mel features
# ---------------------------------------------------------------------------

N_MELS = 40
WINDOW_S = 0.025
HOP_S = 0.010
N_FFT = 512
LOG_FLOOR = 1e-6

_filterbank_cache: dict[tuple[int, int], np.ndarray] = {}


def _hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def _mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int = N_MELS, n_fft: int = N_FFT, rate: int = SAMPLE_RATE) -> np.ndarray:
    """Triangular filters, (n_mels, n_fft // 2 + 1)."""
    key = (n_mels, n_fft)
    if key not in _filterbank_cache:
        edges = _mel_to_hz(np.linspace(_hz_to_mel(0.0), _hz_to_mel(rate / 2), n_mels + 2))
        bins = np.fft.rfftfreq(n_fft, d=1.0 / rate)
        fb = np.zeros((n_mels, bins.shape[0]))
        for m in range(n_mels):
            lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
            rising = (bins - lo) / max(mid - lo, 1e-9)
            falling = (hi - bins) / max(hi - mid, 1e-9)
            fb[m] = np.clip(np.minimum(rising, falling), 0.0, None)
        _filterbank_cache[key] = fb
    return _filterbank_cache[key]


def frame_signal(x: np.ndarray, window: int, hop: int) -> np.ndarray:
    """(T, window) strided view; T = floor((n - window) / hop) + 1."""
    if x.shape[0] < window:
        raise TooShortError(f"signal of {x.shape[0]} samples shorter than window {window}")
    return np.lib.stride_tricks.sliding_window_view(x, window)[::hop]


def mel_features(
    u: Utterance,
    n_mels: int = N_MELS,
    window_s: float = WINDOW_S,
    hop_s: float = HOP_S,
) -> FeatureSequence:
    """Log-compressed mel filterbank energies, log(x + 1e-6)."""
    window = int(round(window_s * SAMPLE_RATE))
    hop = int(round(hop_s * SAMPLE_RATE))
    n_fft = N_FFT
    while n_fft < window:
        n_fft *= 2
    frames = frame_signal(u.samples.astype(np.float64), window, hop)
    windowed = frames * np.hanning(window)
    power = np.abs(np.fft.rfft(windowed, n=n_fft, axis=1)) ** 2
    energies = power @ mel_filterbank(n_mels, n_fft).T
    return FeatureSequence(frames=np.log(energies + LOG_FLOOR), frame_hop_s=hop_s)


# ---------------------------------------------------------------------------
# Cropping
# ---------------------------------------------------------------------------

def crop_to_max(
    u: Utterance,
    max_s: float,
    rng: np.random.Generator,
    align: int = 1,
) -> Utterance:
    """Random contiguous crop to at most max_s seconds (returns u if under).

    Crop offsets are uniform over positions that are multiples of ``align``
    samples; aligning to the feature hop makes audio-domain crops equal
    frame-domain crops of precomputed features.
    """
    if max_s <= 0:
        raise ValueError("max_s must be positive")
    limit = int(round(max_s * SAMPLE_RATE))
    n = u.samples.shape[0]
    if n <= limit:
        return u
    n_positions = (n - limit) // align + 1
    offset = align * int(rng.integers(n_positions))
    return Utterance(id=u.id, samples=u.samples[offset:offset + limit], style=u.style)


def crop_leading(u: Utterance, max_s: float) -> Utterance:
    """Deterministic evaluation-mode crop: keep the leading max_s seconds."""
    limit = int(round(max_s * SAMPLE_RATE))
    if u.samples.shape[0] <= limit:
        return u
    return Utterance(id=u.id, samples=u.samples[:limit], style=u.style)


# ---------------------------------------------------------------------------
# Synthetic corpus
# ---------------------------------------------------------------------------

SYNTH_BASE_LOG = -4.0        # overall log-energy floor of rendered spectra
PROTO_SCALE = 2.5            # spread of per-style prototype envelopes (log units)
WITHIN_SCALE = 2.5           # within-style deviation before (1 - separability) scaling
SYNTH_FRAME = 512
SYNTH_HOP = 160


def _smooth_profile(rng: np.random.Generator, n: int, width: float = 2.0) -> np.ndarray:
    """Smooth zero-mean random curve over n channels."""
    raw = rng.standard_normal(n)
    offsets = np.arange(-3 * int(width), 3 * int(width) + 1)
    kernel = np.exp(-0.5 * (offsets / width) ** 2)
    kernel /= kernel.sum()
    padded = np.pad(raw, 3 * int(width), mode="reflect")
    smooth = np.convolve(padded, kernel, mode="valid")
    return smooth - smooth.mean()


def _render_noise(log_mel_track: np.ndarray, rng: np.random.Generator, n_samples: int) -> np.ndarray:
    """Render a (T, n_mels) log-mel energy track to a waveform of filtered noise."""
    fb = mel_filterbank(log_mel_track.shape[1], SYNTH_FRAME)
    spread = fb / np.maximum(fb.sum(axis=1, keepdims=True), 1e-9)  # unit mass per channel
    bin_power = np.exp(log_mel_track) @ spread  # (T, n_bins)
    t, n_bins = bin_power.shape
    scale = np.sqrt(bin_power / 2.0)
    spectrum = scale * (rng.standard_normal((t, n_bins)) + 1j * rng.standard_normal((t, n_bins)))
    frames = np.fft.irfft(spectrum, n=SYNTH_FRAME, axis=1)
    window = np.hanning(SYNTH_FRAME)
    total = (t - 1) * SYNTH_HOP + SYNTH_FRAME
    signal = _accel.overlap_add(frames * window, SYNTH_HOP, total)
    weight = _accel.overlap_add(
        np.broadcast_to(window ** 2, (t, SYNTH_FRAME)).copy(), SYNTH_HOP, total
    )
    signal = signal / np.maximum(weight, 1e-3)
    return signal[:n_samples]


def synth_corpus(spec: SyntheticCorpusSpec) -> Corpus:
    """Deterministic labeled corpus with controllable style separability."""
    rng = np.random.default_rng(spec.seed)
    n_styles = len(spec.styles)
    protos = np.stack([PROTO_SCALE * _smooth_profile(rng, N_MELS) for _ in range(n_styles)])
    mod_rate = rng.uniform(0.5, 4.0, size=n_styles)
    mod_depth = rng.uniform(0.2, 0.6, size=n_styles)
    mod_phase = rng.uniform(0.0, 2.0 * np.pi, size=n_styles)

    lo, hi = spec.duration_range_s
    within = WITHIN_SCALE * (1.0 - spec.separability)
    utterances = []
    for sid, name in enumerate(spec.styles):
        for j in range(spec.utterances_per_style):
            duration = rng.uniform(lo, hi)
            n_samples = int(round(duration * SAMPLE_RATE))
            n_frames = (n_samples + SYNTH_FRAME) // SYNTH_HOP + 1
            deviation = within * _smooth_profile(rng, N_MELS)
            times = np.arange(n_frames) * (SYNTH_HOP / SAMPLE_RATE)
            modulation = mod_depth[sid] * np.sin(
                2.0 * np.pi * mod_rate[sid] * times + mod_phase[sid]
            )
            track = SYNTH_BASE_LOG + protos[sid] + deviation + modulation[:, None]
            samples = _render_noise(track, rng, n_samples)
            utterances.append(
                Utterance(
                    id=f"{name}-{j:04d}",
                    samples=np.clip(samples, -1.0, 1.0).astype(np.float32),
                    style=sid,
                )
            )
    return Corpus(utterances=tuple(utterances), registry=spec.styles)


# ---------------------------------------------------------------------------
# Splitting and persistence
# ---------------------------------------------------------------------------

def split_corpus(
    corpus: Corpus,
    fractions: tuple[float, float, float],
    seed: int,
) -> tuple[Corpus, Corpus, Corpus]:
    """Stratified disjoint train/val/test partition."""
    if any(f <= 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("fractions must be positive and sum to 1")
    rng = np.random.default_rng(seed)
    groups = corpus.by_style()
    if None in groups:
        raise ValueError("split_corpus requires every utterance to carry a style label")
    parts: tuple[list[Utterance], ...] = ([], [], [])
    for sid in sorted(groups):
        group = groups[sid]
        if len(group) < 3:
            raise StratificationError(
                f"style {corpus.registry.name_of(sid)!r} has {len(group)} utterances, need >= 3"
            )
        order = rng.permutation(len(group))
        n = len(group)
        n_train = max(1, int(round(fractions[0] * n)))
        n_val = max(1, int(round(fractions[1] * n)))
        while n_train + n_val > n - 1:
            if n_train > 1:
                n_train -= 1
            else:
                n_val -= 1
        bounds = (n_train, n_train + n_val)
        for rank, idx in enumerate(order):
            bucket = 0 if rank < bounds[0] else (1 if rank < bounds[1] else 2)
            parts[bucket].append(group[idx])
    return tuple(
        Corpus(utterances=tuple(sorted(p, key=lambda u: u.id)), registry=corpus.registry)
        for p in parts
    )


def save_corpus(corpus: Corpus, directory: str | Path) -> Path:
    """Write WAVs plus a manifest mapping id -> {path, style, duration_s}."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {}
    for u in corpus.utterances:
        rel = f"{u.id}.wav"
        save_wav(directory / rel, u.samples)
        manifest[u.id] = {
            "path": rel,
            "style": corpus.registry.name_of(u.style) if u.style is not None else None,
            "duration_s": u.duration_s,
        }
    manifest_path = directory / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True), "utf-8")
    return manifest_path


def load_corpus(manifest_path: str | Path) -> tuple[Corpus, dict[str, str]]:
    """Load a manifest directory; returns the corpus and an id -> wav path map.

    The registry is rebuilt from the styles present, in sorted order (the
    default 22-style registry is already alphabetical, so full corpora
    round-trip with identical ids).
    """
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.json"
    root = manifest_path.parent
    manifest = json.loads(manifest_path.read_text("utf-8"))
    names = sorted({entry["style"] for entry in manifest.values() if entry["style"] is not None})
    registry = StyleRegistry(tuple(names)) if names else StyleRegistry()
    utterances = []
    paths: dict[str, str] = {}
    for uid in sorted(manifest):
        entry = manifest[uid]
        wav_path = root / entry["path"]
        u = load_wav(wav_path)
        style = registry.id_of(entry["style"]) if entry["style"] is not None else None
        utterances.append(Utterance(id=uid, samples=u.samples, style=style))
        paths[uid] = str(wav_path)
    return Corpus(utterances=tuple(utterances), registry=registry), paths
