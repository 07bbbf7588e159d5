"""
Catch and prolong - recurrent track finding for strip/GEM trackers.

This package provides a toy detector simulator, a directed seed search, a
small numpy neural toolkit, the combined classification/ellipse network,
its joint cost, a trainer, an ellipse-gated track follower and the
command-line pipeline tying them together.
"""

__version__ = "0.1.0"
