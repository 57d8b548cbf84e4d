"""Unit tests for the aqa-transformer modules."""
