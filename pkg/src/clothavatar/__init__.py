"""Animatable clothed avatars from monocular video, built from splatted Gaussians.

Modules: ``body`` (procedural skinned body), ``codec`` (latent -> triplane ->
Gaussians), ``closim`` (cloth dynamics offsets), ``render`` (differentiable
splatting), ``losses``, ``parts`` (decomposition and transfer), ``diffcheck``
(gradient checks), ``studio`` (synthetic data) and ``train`` (training,
evaluation, animation, checkpoints).
"""

__version__ = "0.1.0"
