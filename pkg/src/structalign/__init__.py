"""Structure alignment of a small protein language model: masked language modeling
plus residue-level contrastive and structure-token objectives, with excess-loss
residue selection against a frozen reference model."""

__version__ = "0.1.0"
