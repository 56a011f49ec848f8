"""Multi-view text-to-image diffusion with per-block guidance routing,
plus score-distillation lifting of the trained model to a voxel field."""

__version__ = "0.1.0"
