"""
Run configuration
"""
