"""Advert assignment, parametrized-VCG pricing and bid dynamics."""

__version__ = "0.1.0"
