"""Speech-driven head motion from raw waveforms.

Canonical-correlation-constrained autoencoder over 4 kHz waveform frames,
a context-window regressor to head rotation vectors, an autoencoder
post-filter, and the objective metrics used to compare systems.
"""

__version__ = "0.1.0"
