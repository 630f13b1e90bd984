"""
Core numerics
Toral automorphisms, DA maps, the semiconjugacy, plaques, ergodic statistics and coupling
"""
