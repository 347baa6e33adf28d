"""Multi-view adapter kit.

A self-contained multi-view image generator: a frozen miniature text-to-image
denoising backbone plus a plug-in adapter (condition guider + decoupled parallel
attention), trained and evaluated end to end on a procedural synthetic multi-view
dataset.
"""

__version__ = "0.1.0"
