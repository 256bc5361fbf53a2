"""Arc-formation pursuit: simulator, receding-horizon expert, and imitation stack."""

__version__ = "0.1.0"
