"""patchlm: a desk-scale encoder-free vision-language decoder.

Images are sliced into 30x30 pixel patches, linearly projected, and fed to a
decoder-only transformer interleaved with byte-level text tokens. The package
covers the full loop: patch tokenization, model, instruction pipeline, LoRA,
training, evaluation protocols, and a throughput harness.
"""

__version__ = "0.1.0"
