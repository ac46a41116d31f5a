"""Backdoor-robust website fingerprinting: poisoning, detection, unlearning."""

__version__ = "0.1.0"
