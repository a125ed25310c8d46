"""WaveNet and spectral autoencoders for musical notes.

Submodules: ``dsp`` (mu-law, WAV, synthetic notes), ``spectral`` (STFT,
Griffin-Lim, spectral losses), ``rainbowgram`` (CQT displays), ``autodiff``
(the tensor library), ``wavenet`` and ``baseline`` (the two autoencoders),
``data`` (record files and the note schema), ``eval`` and ``cli``.
"""
__version__ = "0.1.0"
