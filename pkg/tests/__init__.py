"""
Test suite for dcbox
"""
