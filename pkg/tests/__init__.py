"""Tests for medagent-harness."""
