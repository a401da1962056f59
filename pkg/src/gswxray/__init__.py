"""Gunshot-wound radiograph pipeline: synthesis, formats, anchors, metrics, classifier, CAM."""

__version__ = "0.1.0"
