"""Agent runtime: context assembly, LLM backends, tool mediation, reports."""
