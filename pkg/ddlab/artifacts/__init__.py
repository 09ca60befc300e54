"""
Atomic, content-hashed artifact writing and the run manifest.
"""
