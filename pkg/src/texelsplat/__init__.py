"""texelsplat: animatable Gaussian-splat avatars on a deformable template mesh.

The pipeline, frame by frame: a skeleton pose drives embedded deformation and
dual-quaternion skinning of a template mesh; posed geometry is baked into
position/normal textures; convolutional decoders translate those textures into
per-texel Gaussian parameters; the splats are posed to world space and
rendered with a tile-based software rasterizer. Everything is differentiable,
so the decoders can be trained from multi-view images alone.
"""

__version__ = "0.1.0"
