"""
Evaluation Module
Experiment runner behind the command line subcommands
"""
