"""Multi-object tracking with a learned selective state-space motion model."""

__version__ = "0.1.0"
CHECKPOINT_FORMAT = "ssmmot-ckpt v1"
