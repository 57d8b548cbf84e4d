"""Builders and scripted stand-ins shared by the tests."""
