"""Tests for the resect_eval package"""
