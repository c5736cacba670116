"""Closed-form knowledge consolidation for a toy transformer."""

from ._qf import *  # noqa: F401,F403
from ._qf import QfError, ErrorKind  # noqa: F401
