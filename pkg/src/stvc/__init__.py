"""Low-latency neural video codec toolkit: temporal autoregressive transforms,
scale-space flow, learned entropy models and a bit-exact range coder."""

from __future__ import annotations

__version__ = "0.1.0"
