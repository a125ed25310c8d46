# %% [markdown]
# # Two autoencoders at desk scale
#
# Trains the WaveNet autoencoder and the spectral baseline on a small
# synthetic corpus, then asks two questions of each: does the embedding
# carry information the decoder uses, and what does pitch conditioning do
# to the decoded output. Takes a few minutes on one core.
#
#     python3 demos/toy_autoencoders.py

# %%
import time

import numpy as np

from nsynth_forge.baseline import BaselineAutoencoder
from nsynth_forge.data import generate_toy_corpus
from nsynth_forge.eval import linear_pitch_probe
from nsynth_forge.pipeline import (teacher_forced_ce, toy_baseline_config, toy_wavenet_configs, train_baseline,
                                   train_wavenet, wavenet_embeddings)
from nsynth_forge.wavenet import WavenetAutoencoder

t0 = time.time()
recs = list(generate_toy_corpus(4, seed=0, n_pitches=6, velocities=(100,), duration_s=0.5))
A = np.stack([r.audio for r in recs])
P = np.array([r.pitch for r in recs])
print(len(recs), "notes, pitches", sorted(set(P.tolist())))

# %% [markdown]
# ## WaveNet autoencoder
#
# The encoder pools to one 8-dim vector per 100 samples; the decoder is an
# 8-layer dilated causal stack predicting 256-way mu-law codes. Random
# 2000-sample crops keep each step cheap.

# %%
wn = WavenetAutoencoder(*toy_wavenet_configs(), seed=0)
hist = train_wavenet(wn, A, steps=150, lr=3e-3, batch_size=8, crop=2000, seed=0)
print(f"wavenet CE {hist[0]:.3f} -> {np.mean(hist[-10:]):.3f} ({time.time() - t0:.0f} s)")

# %% [markdown]
# If the decoder relies on z, giving every note another note's embedding
# should cost likelihood.

# %%
X = A[:, :2000]
z = wavenet_embeddings(wn, X).transpose(0, 2, 1)
print(f"teacher-forced CE: own z {teacher_forced_ce(wn, X, z):.3f}, "
      f"shuffled z {teacher_forced_ce(wn, X, np.roll(z, 1, axis=0)):.3f}")

# %% [markdown]
# A linear probe on the flattened embedding: how much pitch does it carry?
# Toy instruments cover different pitch ranges, so most pitches have one or
# two notes here and the estimate is coarse.

# %%
E = wavenet_embeddings(wn, A)
r = linear_pitch_probe(E.reshape(len(E), -1), P, held_out_n=6, seed=0)
print(f"probe accuracy {r.accuracy:.1f}% on {r.n_test} held-out notes (chance {100 / len(set(P)):.1f}%)")

# %% [markdown]
# ## Spectral baseline with pitch conditioning
#
# A convolutional autoencoder over a 32x128 log-magnitude grid, with a
# one-hot pitch appended to its 32-dim code. Holding z fixed and changing
# the pitch gives distinct planes. After a run this short the decoder leans
# on z far more than on the pitch input, so the differences are small.

# %%
bl = BaselineAutoencoder(toy_baseline_config(pitch_conditioning=True), seed=0)
grids = np.stack([bl.prepare_audio(x)[0] for x in A])
hist = train_baseline(bl, grids, P, steps=200, lr=2e-3, seed=0)
print(f"baseline loss {hist[0]:.4f} -> {hist[-1]:.4f} ({time.time() - t0:.0f} s)")

grid, M = bl.prepare_audio(A[0])
code = bl.encode(grid)
planes = {shift: bl.decode(code, int(P[0]) + shift, like=M).values for shift in (-5, 0, 7)}
for shift, plane in planes.items():
    print(f"pitch {P[0] + shift}: mean |difference| from the true pitch's plane "
          f"{np.abs(plane - planes[0]).mean():.4f}")
