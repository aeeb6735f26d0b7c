"""Differentiable tiled Gaussian splatting, a small tracking/mapping loop, and a cycle-approximate accelerator model."""
