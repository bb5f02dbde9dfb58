"""Desk-scale lab for voxel fusion, flow-based reconstruction and affordance
grounding, and affordance-driven active view planning on synthetic objects."""

__version__ = "0.1.0"
