"""Constant mean curvature surfaces condensing to networks of curves."""
