"""Exception hierarchy shared across the toolkit.

Data problems (bad files, broken invariants, malformed records) and remote
service problems (judge endpoint failures) are kept distinct so the CLI can
map them to different exit codes.
"""


class VispriorError(Exception):
    """Base class for all toolkit errors."""


class DataError(VispriorError):
    """Invalid input data or a violated structural invariant."""


class RemoteServiceError(VispriorError):
    """A remote LLM endpoint failed or returned an unusable reply."""
