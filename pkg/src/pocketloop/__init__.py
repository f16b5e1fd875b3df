"""Hardware-free instant policy iteration: data serving, online finetuning,
hot-swap inference, and a synthetic operator over a 2-D block-sorting world."""

__version__ = "0.1.0"
