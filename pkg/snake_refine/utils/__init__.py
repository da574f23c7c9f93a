"""
Run logging and file formats
"""
