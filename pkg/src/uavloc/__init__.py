"""UAV absolute visual localization against 2.5D (orthophoto + DSM) reference maps.

The pipeline is coarse-to-fine: gallery retrieval narrows the search area,
pixel matching yields 2D-2D correspondences, the DSM lifts map points to 3D,
and a three-point solver inside RANSAC recovers the camera position in UTM.
A procedural scene simulator provides exact ground truth for validation.
"""

__version__ = "0.1.0"
