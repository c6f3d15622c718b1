"""anchorflow: a desk-scale anchored flow-matching video generation stack.

The pipeline factors text-to-video synthesis into three stages: a prompt
reducer that extracts the initial scene, a deterministic rasterizer that
renders it into an anchor image, and a small video flow model that animates
the anchored scene. Everything is seeded and reproducible down to the byte.
"""

__version__ = "0.1.0"

from anchorflow import errors  # noqa: F401
