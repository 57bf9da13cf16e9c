"""muk: a user-space microkernel web runtime.

Hosts application modules under InProcess and Subprocess paradigms, routes
and balances requests, supervises service lifecycles, and self-heals
execution environments through a MAPE-K loop with I/O-aware monitoring.
"""

from .config import KernelConfig, load_config
from .kernel import Kernel, boot

__all__ = ["Kernel", "KernelConfig", "boot", "load_config"]
__version__ = "0.1.0"
