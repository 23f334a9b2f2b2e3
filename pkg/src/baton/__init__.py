"""Plan-then-synthesise toy pipeline for synchronised video and audio latents."""

__version__ = "0.1.0"
