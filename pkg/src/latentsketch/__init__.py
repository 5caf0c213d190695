"""latentsketch: desk-scale mixed text/latent chain-of-thought training."""

__version__ = "0.1.0"

CODE_VERSION = f"latentsketch-{__version__}"
