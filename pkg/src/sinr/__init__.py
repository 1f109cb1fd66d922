"""Split inference that tolerates packet loss without retransmission."""

__version__ = "0.1.0"
