"""Time-aware Android malware detection: static extraction, timestamp
verification, BYOL pre-training and chronological evaluation."""

__version__ = "0.1.0"
