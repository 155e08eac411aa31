"""Road-surface elevation reconstruction in bird's-eye view.

Monocular and stereo elevation estimation on a ground-aligned grid:
camera geometry, ground-truth rasterization, voxel feature projection,
bin-classification heads with soft-argmin readout, synthetic road scenes,
metrics, and a training/evaluation CLI.
"""

__version__ = "0.1.0"
