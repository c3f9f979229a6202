"""FastAPI service exposing fit, sample, evaluate and audit."""
