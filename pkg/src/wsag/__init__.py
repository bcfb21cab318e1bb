"""Pseudo-label supervised affordance grounding."""
