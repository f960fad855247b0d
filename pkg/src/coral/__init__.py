"""Correspondence alignment for diptych attention at toy scale."""
