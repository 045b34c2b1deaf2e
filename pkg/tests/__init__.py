"""Tests for probact."""
