"""Collaborative / simultaneous training of the denoiser and the detector."""
