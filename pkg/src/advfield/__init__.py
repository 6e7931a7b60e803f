"""Sensor-aware adversarial vector-field augmentation for LiDAR point clouds."""

__version__ = "0.1.0"
