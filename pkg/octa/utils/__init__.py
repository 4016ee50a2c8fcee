"""
Utility modules package.

This package contains low-level utility implementations:
- raster: image/mask containers, PGM/PPM codec, pixel scale, patches, regions
- manifest: dataset manifests and key=value sidecar metadata
"""
