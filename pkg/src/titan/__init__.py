"""VQE workbench with adaptive parameter freezing and a learned freeze predictor."""
