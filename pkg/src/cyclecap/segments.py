"""Normalized temporal segments and interval arithmetic.

A segment is a (center, width) pair on the normalized timeline [0, 1].
Segments are stored unclamped; consumers clamp endpoints to [0, 1] when
they need concrete interval bounds.
"""

from __future__ import annotations

from dataclasses import dataclass

MIN_WIDTH = 1e-4


@dataclass(frozen=True)
class TemporalSegment:
    """Normalized (center, width) description of an event's time span."""

    center: float
    width: float

    def bounds(self) -> tuple[float, float]:
        """Endpoints clamped to [0, 1]."""
        lo = min(max(self.center - self.width / 2.0, 0.0), 1.0)
        hi = min(max(self.center + self.width / 2.0, 0.0), 1.0)
        return lo, hi

    def is_valid(self) -> bool:
        """True when the clamped interval has positive length."""
        lo, hi = self.bounds()
        return hi > lo

    def clamped(self, min_width: float = MIN_WIDTH) -> "TemporalSegment":
        """Clamp center to [0, 1] and width to [min_width, 1]."""
        m = min(max(self.center, 0.0), 1.0)
        w = min(max(self.width, min_width), 1.0)
        return TemporalSegment(m, w)


def seconds_to_segment(start: float, end: float, duration: float) -> TemporalSegment:
    """Convert wall-clock [start, end] (seconds) to a normalized segment.

    Requires end > start and duration > 0.
    """
    if duration <= 0:
        raise ValueError(f"duration must be positive, got {duration}")
    if end <= start:
        raise ValueError(f"need end > start, got [{start}, {end}]")
    center = (start + end) / 2.0 / duration
    width = (end - start) / duration
    return TemporalSegment(center, width)


def segment_to_seconds(segment: TemporalSegment, duration: float) -> tuple[float, float]:
    """Convert a normalized segment back to clamped wall-clock endpoints."""
    lo, hi = segment.bounds()
    return lo * duration, hi * duration
