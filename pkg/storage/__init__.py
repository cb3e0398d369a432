"""On-disk formats: PPM frames, keypoint streams and dataset directories."""
