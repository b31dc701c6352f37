"""Traffic congestion event prediction with a spatio-temporal graph neural point process."""
