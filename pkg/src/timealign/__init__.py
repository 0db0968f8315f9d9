"""Query-based temporal action detection with time-aligned segment coordinates."""

from .timeline import ActionInstance, Detection, DetectionSet, FeatureSequence, Segment, VideoMeta

__version__ = "0.1.0"

__all__ = ["ActionInstance", "Detection", "DetectionSet", "FeatureSequence", "Segment", "VideoMeta"]
