"""Test suite for the echo-face anti-spoofing toolkit."""
