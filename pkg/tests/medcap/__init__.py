"""Tests for medcap."""
