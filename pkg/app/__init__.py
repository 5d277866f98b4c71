# Marcus Wong-Zakai weak convergence toolkit
__version__ = "1.0.0"
__author__ = "Marcus WZ Team"
__description__ = "Wong-Zakai scheme and weak-error experiments for Levy-driven Marcus SDEs"
