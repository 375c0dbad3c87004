"""Stack-based multimodal sequence alignment with LARS, sequence-wise batch norm and random projection."""
__version__ = "0.1.0"
