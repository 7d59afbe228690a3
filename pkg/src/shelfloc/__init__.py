"""Weakly supervised product localization on shelf images."""
