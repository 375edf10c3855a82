"""Level-of-detail octree radiance fields.

Reconstructs a scene as a tree of small voxel radiance fields, one per
cube per scale, and renders by routing each sampling sphere to the node
whose granularity matches its footprint.  Any single frame therefore only
touches a logarithmic slice of the model, and coarse nodes double as the
prefiltered version of the scene for anti-aliased zoom-outs.
"""

__version__ = "0.1.0"
