"""Single-image deraining with a deformable degradation encoder, a constraint
network that supervises the degradation features, and a U-Net restorer,
all built on a small numpy autograd library."""

__version__ = "0.1.0"
