"""modnet: a modular, message-passing network stack at desk scale.

Protocol layers run as independently scheduled module contexts exchanging a
unified message protocol; packet memory lives in a central priority-aware
buffer; a deterministic multi-node simulator with lossy links makes the
architecture's properties testable.
"""

__version__ = "0.1.0"
