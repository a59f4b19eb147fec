"""
Tests package
tests/__init__.py
"""
