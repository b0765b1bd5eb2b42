"""Desk-scale simulation of a platform-as-a-service: master and worker
containers, a message proxy, dynamic provisioning against a simulated cloud,
blob-based file transfer and Task/Thread programming models."""

__version__ = "0.1.0"
