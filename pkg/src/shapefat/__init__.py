"""Body-shape depth maps to liver-fat percentage."""
__version__ = "0.1.0"
