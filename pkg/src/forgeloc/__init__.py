"""Image forgery localization with information-constrained feature learning.

Three attention U-Net backbones (channel / spatial / pixel gates) feed a
learnable fusion layer; training couples a pixel-wise localization loss with
a KL-based per-branch contribution penalty, a conditional-bottleneck style
feature/mask agreement penalty, and an auxiliary denoised-mask loss. A
separate module provides exact discrete-distribution checkers for the
information identities the objectives rest on.
"""

__version__ = "0.1.0"
