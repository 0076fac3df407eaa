import csv
import json
import struct
from pathlib import Path

import numpy as np
import pytest
from scipy.io import wavfile

from acre import space
from acre.seeding import derive_seed


def write_wav_pcm16(path, data: np.ndarray, rate: int = 32000) -> None:
    """Independent PCM16 writer (scipy); data is int16 or float in [-1, 1]."""
    if data.dtype != np.int16:
        data = np.round(np.asarray(data, dtype=np.float64) * 32768.0).clip(-32768, 32767).astype(np.int16)
    wavfile.write(path, rate, data)


def write_wav_float32(path, data: np.ndarray, rate: int = 32000) -> None:
    wavfile.write(path, rate, np.asarray(data, dtype=np.float32))


def raw_wav_bytes(data_int16: np.ndarray, rate: int, channels: int, fmt_code: int = 1, bits: int = 16) -> bytes:
    """Hand-packed WAV for header-level edge cases."""
    payload = data_int16.astype("<i2").tobytes() if bits == 16 else data_int16.astype("<f4").tobytes()
    block = channels * bits // 8
    header = b"RIFF" + struct.pack("<I", 36 + len(payload)) + b"WAVE"
    header += b"fmt " + struct.pack("<IHHIIHH", 16, fmt_code, channels, rate, rate * block, block, bits)
    header += b"data" + struct.pack("<I", len(payload))
    return header + payload


def make_latent_pairs(seed, n_train=200, n_eval=50, latent_dim=32, d_audio=48, d_text=40, noise=0.05):
    """Two random linear views of shared latents, plus Gaussian noise."""
    rng = np.random.default_rng(derive_seed(seed, "synthetic-latents"))
    view_a = rng.normal(0, 1, (d_audio, latent_dim)) / np.sqrt(latent_dim)
    view_t = rng.normal(0, 1, (d_text, latent_dim)) / np.sqrt(latent_dim)

    def draw(n, tag):
        out = []
        for i in range(n):
            z = rng.normal(0, 1, latent_dim)
            a = view_a @ z + rng.normal(0, noise, d_audio)
            t = view_t @ z + rng.normal(0, noise, d_text)
            out.append(space.TrainPair(f"{tag}{i:04d}", a, (t,)))
        return out

    return draw(n_train, "train"), draw(n_eval, "eval")


@pytest.fixture
def wav_dataset(tmp_path):
    """Six one-second tones plus a manifest and an augmented-captions file."""
    audio_dir = tmp_path / "audio"
    audio_dir.mkdir()
    rng = np.random.default_rng(42)
    rate = 32000
    names = []
    for i in range(6):
        t = np.arange(rate) / rate
        x = 0.4 * np.sin(2 * np.pi * 200 * (i + 1) * t) + 0.05 * rng.normal(size=rate)
        names.append(f"clip{i}.wav")
        write_wav_pcm16(audio_dir / names[-1], np.clip(x, -0.99, 0.99), rate)

    manifest = tmp_path / "manifest.csv"
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["file_name"] + [f"caption_{k}" for k in range(1, 6)] + ["keywords"])
        for i, name in enumerate(names):
            caps = [f"a tone of kind {i} sounds {adj}" for adj in ("loud", "soft", "distant", "near", "steady")]
            writer.writerow([name] + caps + ["tone;synthetic"])

    augmented = tmp_path / "augmented.jsonl"
    with open(augmented, "w") as fh:
        for name in names:
            for ci in range(5):
                fh.write(
                    json.dumps(
                        {
                            "clip_id": name,
                            "caption_index": ci,
                            "variants": [f"variant {v} of caption {ci} for {name}" for v in range(5)],
                        }
                    )
                    + "\n"
                )
    return {"dir": tmp_path, "audio_dir": audio_dir, "manifest": manifest, "augmented": augmented, "names": names}
