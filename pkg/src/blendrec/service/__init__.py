"""HTTP serving layer over a completed run directory."""
