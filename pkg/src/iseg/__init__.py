"""Interactive click-driven image segmentation engine.

Library surface: autodiff tensors, mask/click utilities, the
windowed-attention segmentation model, training, number-of-clicks
evaluation, volume mask propagation, and an HTTP session service.
"""

__version__ = "0.1.0"
