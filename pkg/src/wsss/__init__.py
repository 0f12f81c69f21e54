"""Three-step weakly supervised semantic segmentation: CAMs, CRF/affinity
refinement of pseudo-masks, and supervised segmentation."""

__version__ = "0.1.0"
