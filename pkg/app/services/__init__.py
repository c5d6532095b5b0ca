"""Few-shot segmentation model, episode data and experiment services."""
