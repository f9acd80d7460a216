#!/usr/bin/env python3
"""
Compensated Inference - error types
Every failure the CLI reports maps to one of these, each carrying its exit code.
"""


class CompInferError(Exception):
    """Base class for all library errors"""
    exit_code = 1


class ConfigError(CompInferError):
    """Invalid configuration, arguments or input shapes"""
    exit_code = 2


class ShapeError(ConfigError, ValueError):
    """Matrix dimensions do not line up"""


class RangeError(ConfigError, ValueError):
    """Rank or index outside its admissible range"""


class ProvenanceError(CompInferError):
    """Input file hashes do not match what the consumer expects"""
    exit_code = 3


class NumericError(CompInferError):
    """Non-finite values, SVD failure or a violated numeric invariant"""
    exit_code = 4


class ProtocolError(CompInferError):
    """Backbone/compensator rendezvous failure (timeout, desync, worker panic)"""
    exit_code = 5
