"""Selective imitation learning with validator-induced abstention."""
