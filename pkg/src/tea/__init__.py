"""Energy-based adaptation of normalization layers at test time."""
