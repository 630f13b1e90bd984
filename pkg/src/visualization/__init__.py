"""
Visualization Module
Log-linear decay charts
"""
