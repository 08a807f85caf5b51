"""
Tests package for jamident.
"""
