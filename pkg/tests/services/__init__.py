"""Tests for API services."""
