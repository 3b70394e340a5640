"""Conditional latent diffusion over segmented style vectors.

Subpackage map: ``tensor``/``optim`` (autodiff core and AdamW), ``latent``
(segmentation + synthetic world), ``dataset`` (kinship triplets), ``denoiser``
(token transformer), ``diffusion`` (schedule, DDIM, training steps),
``guidance`` (null conditions, relational composition), ``attribute_block``
(offset MLP retargeting), ``metrics`` (diversity/identity/attribute scores),
``config``/``checkpoint``/``cli`` (harness).
"""

__version__ = "0.1.0"
