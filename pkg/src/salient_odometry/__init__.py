"""
Salient Odometry

Monocular direct sparse visual odometry that spends its point budget where
visual saliency (filtered by scene parsing) says the scene is informative,
together with a synthetic benchmark for measuring that choice.
"""

__version__ = "0.1.0"
