"""Memory-safety exploitation lab over an emulated WebAssembly guest.

Vulnerable linear-memory primitives (stack overflow, format string,
use-after-free, integer narrowing) escalate into web-tier attacks:
SQL injection against an in-memory query engine, template injection
through a page nonce, and a blind timing side channel built on
catastrophic regex backtracking.
"""

__version__ = "0.1.0"
