"""Incident detection and dispatch hub.

Ingests detector events (face embeddings, fingerprint probes, weapon
detections), identifies suspects by threshold-gated cosine similarity,
raises silent alarms, notifies the nearest police station and produces
extractive summaries of incident reports.
"""

__version__ = "0.1.0"
