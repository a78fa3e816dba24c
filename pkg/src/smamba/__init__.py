"""Prior-guided adapter fine-tuning of a frozen ViT segmenter, in NumPy.

A multi-scale convolution pyramid gated by selective-scan (Mamba) layers
produces a domain prior that adapters inject into a frozen encoder. The
encoder's pseudo mask then prompts a two-way mask decoder.
"""
__version__ = "0.1.0"
