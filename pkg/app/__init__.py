"""Face animation from a headset mouth camera: keypoint-driven multi-source reenactment."""

__version__ = "0.1.0"
