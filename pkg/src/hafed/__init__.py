"""Federated unimodal-training / multimodal-prediction simulator."""

__version__ = "0.1.0"
