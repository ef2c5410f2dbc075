"""Self-supervised pretraining, finetuning and semi-supervised post-training for birdsong syllable detection."""

__version__ = "0.1.0"
