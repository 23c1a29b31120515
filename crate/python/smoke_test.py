#!/usr/bin/env python3
"""End-to-end exercise of the Python bindings.

Build the extension first, then run this script from anywhere:

    cargo build -p bandiff-py
    python3 python/smoke_test.py
"""

import math
import shutil
import sys
import tempfile
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def import_extension():
    """Copy the built cdylib to an importable name and import it."""
    candidates = [
        ROOT / "target" / "debug" / "libbandiff_py.so",
        ROOT / "target" / "release" / "libbandiff_py.so",
    ]
    built = next((p for p in candidates if p.exists()), None)
    if built is None:
        sys.exit("libbandiff_py.so not found; run `cargo build -p bandiff-py` first")
    stage = Path(tempfile.mkdtemp(prefix="bandiff_py_"))
    shutil.copy(built, stage / "bandiff_py.so")
    sys.path.insert(0, str(stage))
    import bandiff_py

    return bandiff_py


def snr_db(ref, rec):
    num = sum(r * r for r in ref)
    den = sum((a - b) ** 2 for a, b in zip(ref, rec))
    return 10.0 * math.log10(num / den) if den > 0 else float("inf")


TINY_CONFIG = """
eq_n_bands = 4
eq_noise_samples = 100000
schedule_train_steps = 50
sampling_steps = 10
denoiser_depth = 1
denoiser_base_channels = 2
denoiser_growth = 2
denoiser_kernel = 3
denoiser_t_embed_dim = 4
conditioner_k = 4
conditioner_n_books = 1
conditioner_frame_len = 128
conditioner_hop = 64
conditioner_n_mels = 6
conditioner_fit_iters = 4
training_batch = 2
training_iters = 80
training_crop_len = 512
training_lr = 0.002
seed = 7
"""


def main():
    b = import_extension()
    work = Path(tempfile.mkdtemp(prefix="bandiff_smoke_"))

    # Schedule table sanity: the terminal beta is the configured endpoint,
    # and the power shape spends more steps at low noise than cosine.
    power = b.Schedule.power(7.5, 1e-5, 2.9e-2, 1000)
    cosine = b.Schedule.cosine(1000, 0.008)
    assert abs(power.beta(1000) - 2.9e-2) < 1e-15
    frac = lambda s: sum(s.alpha_bar(t) > 0.99 for t in range(1, 1001)) / 1000.0
    assert frac(power) > frac(cosine)

    # Filterbank round trip on white noise.
    import random

    rnd = random.Random(0)
    noise = b.Signal([rnd.gauss(0.0, 0.3) for _ in range(8000)], 8000)
    bank = b.Bank.design(8000, 4, 255)
    parts = bank.split(noise)
    assert len(parts) == bank.n_bands == 4
    merged = bank.merge(parts)
    assert snr_db(noise.samples(), merged.samples()) >= 40.0

    # EQ fit and invertibility.
    corpus = [
        b.Signal([rnd.gauss(0.0, 0.3) for _ in range(8000)], 8000) for _ in range(2)
    ]
    eq = b.Eq.fit(corpus, bank, 0.4, 100_000, 99)
    assert len(eq.gains()) == 4 and all(g > 0 for g in eq.gains())
    back = eq.deequalize(eq.equalize(noise))
    assert snr_db(noise.samples(), back.samples()) >= 37.0

    # Full tiny pipeline: synthesize, prepare, train, decode, score.
    cfg = b.Config.from_toml(TINY_CONFIG)
    cfg.corpus_dir = str(work / "corpus")
    cfg.artifacts_dir = str(work / "artifacts")
    items = b.synth_corpus(cfg, 4, 1.0)
    assert len(items) == 4
    assert b.prepare(cfg) == 4

    bands = b.train(cfg)
    assert [band for band, _, _ in bands] == [0, 1, 2, 3]
    for band, start, end in bands:
        assert end < start, f"band {band} loss did not move: {start} -> {end}"

    out_a = work / "dec_a.wav"
    out_b = work / "dec_b.wav"
    n_a = b.decode(cfg, Path(items[0]), out_a)
    n_b = b.decode(cfg, Path(items[0]), out_b)
    assert n_a == n_b > 0
    assert out_a.read_bytes() == out_b.read_bytes(), "same-seed decode must be byte-identical"

    ref = b.Signal.load(Path(items[0]))
    dec = b.Signal.load(out_a)
    low, mid, high, avg = b.mel_snr(ref, dec)
    for v in (low, mid, high, avg):
        assert -25.0 <= v <= 25.0 and math.isfinite(v)

    # Identity scoring through the directory-level evaluator clamps hard
    # only for dense spectra, but must at least beat the decode score.
    l2, m2, h2, a2 = b.mel_snr(ref, ref)
    assert a2 >= avg

    print(f"smoke test passed: 4 items trained, decode mel-snr A {avg:.2f} dB")


if __name__ == "__main__":
    main()
