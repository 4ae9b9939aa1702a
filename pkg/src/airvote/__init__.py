"""Byzantine-robust one-bit federated learning with over-the-air hierarchical voting."""

__version__ = "0.1.0"
