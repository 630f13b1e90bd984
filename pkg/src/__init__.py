"""
DA-Torus Lab
DA maps on the 3-torus, their Franks semiconjugacy and the statistics of the maximal measure
"""

__version__ = "0.1.0"
