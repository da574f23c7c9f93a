"""
Network-snake refinement of graph-structured centerline annotations
"""

__version__ = "0.1.0"
