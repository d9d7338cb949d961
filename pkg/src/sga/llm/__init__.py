"""Chat backends, prompt templates and the grounding critic."""
