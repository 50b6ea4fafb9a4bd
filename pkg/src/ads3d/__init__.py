"""Anomaly detection and segmentation on organized 3D scans.

Pipeline: load organized point clouds + RGB, strip the background plane,
describe the scan as a grid of patch features, score patches against a
memory bank of normal training patches, and evaluate with image / pixel
ROC and region-overlap curves.
"""

__version__ = "0.1.0"
