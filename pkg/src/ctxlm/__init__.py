"""Contextual adaptation of interpolated n-gram language models.

Component backoff LMs are trained per application or topic partition, mixed
on the fly with per-utterance weights predicted by a small feed-forward
network, and compared against static and topic-posterior weighting.
"""

__version__ = "0.1.0"


class CtxlmError(Exception):
    """Base class for errors raised by this package.

    ``tag`` is a short machine-readable identifier used by the CLI.
    """

    tag = "error"
