"""lidnet — Lesion-inspired LDCT denoising trained jointly with a lesion detector."""

__version__ = "0.1.0"
