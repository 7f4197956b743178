"""Topology-aware proactive SLA management for NFV telemetry."""

__version__ = "0.1.0"
