"""Post-earnings-announcement drift research engine."""
