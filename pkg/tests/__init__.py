"""Test suite for VL-Reader."""
