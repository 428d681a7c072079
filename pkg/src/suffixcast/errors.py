"""Shared exception types, mapped to CLI exit codes."""


class SuffixcastError(Exception):
    """Base class for package errors."""


class ConfigError(SuffixcastError):
    """Bad or inconsistent configuration (exit code 2)."""


class DataError(SuffixcastError):
    """Malformed or insufficient input data (exit code 3)."""


class NumericError(SuffixcastError):
    """Non-finite values or numeric breakdown during training (exit code 4)."""
