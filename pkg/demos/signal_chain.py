# %% [markdown]
# # From a synthetic note to a rainbowgram and back
#
# Walks one note through the signal side of the package: 8-bit mu-law
# quantisation, the log-power STFT plane, Griffin-Lim phase recovery and a
# rainbowgram image. Runs in well under a minute.
#
#     python3 demos/signal_chain.py [out_dir]

# %%
import sys
from pathlib import Path

import numpy as np

from nsynth_forge.dsp import SynthNoteSpec, mulaw_decode, mulaw_encode, synth_note, wav_write
from nsynth_forge.rainbowgram import render_rainbowgram, rainbowgram_to_image
from nsynth_forge.spectral import StftConfig, griffin_lim, log_power_magnitude, stft

out = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_out")
out.mkdir(exist_ok=True)

# %% [markdown]
# A 1.5 s note at middle C with eight harmonics. The lowest CQT octave needs
# about 1.4 s of audio, so shorter notes can't be drawn as rainbowgrams.

# %%
x = synth_note(SynthNoteSpec(60, 100, n_harmonics=8, harmonic_decay=1.0, seed=0), duration_s=1.5)
wav_write(x, out / "note.wav")
print("samples", len(x), "peak", np.abs(x).max().round(3))

# %% [markdown]
# Mu-law: 256 codes, denser near zero. The round-trip error grows with
# amplitude.

# %%
codes = mulaw_encode(x)
err = np.abs(mulaw_decode(codes) - x)
quiet = np.abs(x) < 0.05
print("codes used", len(np.unique(codes)))
print("max error, quiet samples", err[quiet].max().round(5), " loud samples", err[~quiet].max().round(5))

# %% [markdown]
# Magnitude only, then Griffin-Lim. The consistency error trace never goes up.

# %%
cfg = StftConfig(1024, 256)
M = log_power_magnitude(stft(x, cfg))
y, trace = griffin_lim(M, iters=100, seed=0, length=len(x))
wav_write(y / max(1.0, np.abs(y).max()), out / "griffin_lim.wav")
print("consistency error: first", trace[0].round(3), "last", trace[-1].round(3))
print("monotone", bool(np.all(np.diff(trace) <= 1e-9 * trace[:-1])))

# %% [markdown]
# Rainbowgrams: brightness is log power, colour is the frame-to-frame phase
# advance of each CQT bin. The original has steady colour bands on each
# harmonic. The Griffin-Lim output keeps the brightness pattern but its phase
# is only approximately coherent.

# %%
for name, sig in (("original", x), ("griffin_lim", y)):
    r = render_rainbowgram(sig)
    rainbowgram_to_image(r, out / f"rainbowgram_{name}.png")
    print(name, "rainbowgram", r.magnitude.shape)
