"""Deep patch features and TIFF conversion for organized 3D scan datasets.

Exports one 28 x 28 x 1536 feature tensor per dataset sample from a wide
residual backbone, for consumption by memory-bank anomaly detectors, and
converts float TIFF point clouds into the ADTN tensor container.
"""

__version__ = "0.1.0"
