"""Mix network whose messages are carried between nodes by ordinary web surfers."""

from .crypto import SLOT_SIZE, Suite

__all__ = ["SLOT_SIZE", "Suite", "__version__"]
__version__ = "0.1.0"
