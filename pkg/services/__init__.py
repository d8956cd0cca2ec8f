"""Domain services for the slant study pipeline."""
