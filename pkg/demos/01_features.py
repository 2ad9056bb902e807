"""Log-mel features for a synthetic response, and what segmentation does to a long one."""

import numpy as np

from speechdep.corpus import segment_response
from speechdep.dsp import AudioBuffer, FeatureConfig, frames_count, log_mel, mel_centers, per_utterance_normalize

cfg = FeatureConfig()
t = np.arange(16000) / 16000
tone = AudioBuffer(0.5 * np.sin(2 * np.pi * 1000 * t))

feats = log_mel(tone, cfg)
print("1 s of audio ->", feats.values.shape, "frames x mel bands (expected", frames_count(16000), "frames)")
band = int(feats.values.mean(axis=0).argmax())
print(f"a 1 kHz tone peaks in band {band}, centred at {mel_centers(cfg)[band]:.0f} Hz")

norm = per_utterance_normalize(feats)
print("after normalisation the per-band mean is", np.abs(norm.values.mean(axis=0)).max().round(12))

# a 60 s answer is cut into 25 s pieces; the 10 s tail is kept
long = AudioBuffer(np.zeros(60 * 16000))
print("60 s response ->", [s.duration for s in segment_response(long)], "second segments")
