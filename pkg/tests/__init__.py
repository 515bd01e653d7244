"""
Test suite for the SDD toolkit
"""
