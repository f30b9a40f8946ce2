"""Multi-strategy contrastive learning for weakly supervised segmentation."""

__version__ = "0.1.0"
