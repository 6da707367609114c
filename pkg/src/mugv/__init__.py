"""Desk-scale reimplementation of a large video-generation training stack.

Submodules: ``videovae`` (chunked video VAE), ``dit`` (diffusion transformer
with 3D RoPE), ``flowtrain`` (flow matching, conditioning, sampling),
``expansion`` (function-preserving width growth), ``posttrain`` (DPO / KTO /
checkpoint merging), ``datapipe`` (clip curation), ``infra`` (load balancing,
parallelism planning, fused elementwise op) and ``cli``.
"""

__version__ = "0.1.0"
