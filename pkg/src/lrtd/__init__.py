"""Long-range temporal dependency (LRTD) active learning for phase recognition."""

__version__ = "0.1.0"
