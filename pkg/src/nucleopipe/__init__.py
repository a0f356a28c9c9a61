"""Nuclei segmentation and classification pipeline for H&E tiles.

Modules: ``maps`` (array types and file formats), ``network`` (three-head
encoder-decoder forward pass), ``losses``, ``instseg`` (marker-controlled
watershed), ``classify`` (pixel grouping), ``metrics`` (Dice, bPQ, mPQ),
``synth`` (synthetic scenes) and ``cli``.
"""

__version__ = "0.1.0"
