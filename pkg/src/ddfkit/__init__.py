"""Decoupled dynamic filters in numpy."""
