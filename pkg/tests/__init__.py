"""Tests for the SENT desk laboratory."""
