"""Learned image encryption coupled with deep joint source-channel coding."""

__version__ = "0.1.0"
