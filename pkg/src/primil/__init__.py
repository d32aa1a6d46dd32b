"""Primitive-based imitation learning on a kinematic tabletop."""
