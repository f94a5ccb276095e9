"""vxfast: a deterministic user-space model of a cache-accelerated VXLAN overlay."""

__version__ = "0.1.0"
