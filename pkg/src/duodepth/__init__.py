"""duodepth: desk-scale stereo + monocular depth with bidirectional latent
alignment, dual outputs (metric disparity / relative depth), a procedural
stereo generator, and a disparity evaluation kit."""

__version__ = "0.1.0"
