"""Gradient checks, property suites, golden files and demos."""
