"""peaknetfp: stretch-robust audio fingerprinting from spectral peak clouds.

Pipeline: audio -> mel spectrogram -> 1 s segments -> 256-peak clouds ->
point-set encoder -> 128-d unit fingerprints -> maximum-inner-product
retrieval with sequence verification. A quad-hash baseline (``quadfp``)
covers the classical constellation approach.
"""
from __future__ import annotations

__version__ = "0.1.0"
