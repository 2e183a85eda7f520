"""Tests for Tcomplete."""
