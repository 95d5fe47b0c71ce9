"""Affect-aware tutoring gestures: affect experts, gated fusion, act policy,
act-conditioned motion diffusion, BVH tooling, motion statistics and robot
retargeting."""

__version__ = "0.1.0"
