"""Propensity-score estimation of exposure effects on rare binary outcomes."""
