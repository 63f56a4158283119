"""Monocular tracking of road vehicles as oriented 3D boxes from 2D detections."""

__version__ = "0.1.0"
