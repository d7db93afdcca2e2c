"""Multi-task left-atrium segmentation pipeline.

Subpackages cover the full loop: volume I/O and manifests (volume_io),
per-slice preparation (preprocess), training-time augmentation (augment),
the multi-task U-Net (network), optimization (train), slice-wise inference
with 3D post-processing (inference), volumetric metrics (metrics), synthetic
phantom data (synthgen), and the CLI (cli).
"""

__version__ = "0.1.0"
