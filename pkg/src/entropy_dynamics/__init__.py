"""Entropy dynamics of tabular softmax policy gradient."""
