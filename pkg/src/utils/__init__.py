"""
Utility Functions
Errors, configuration, field cache, artifact writers and the parallel map
"""
