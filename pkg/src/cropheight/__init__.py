"""Wall-to-wall tall/short crop mapping from sparse lidar height samples.

The package turns lidar canopy-height shots into labels for local optical
time-series models: shots are classified into short/tall/tree, filtered for
view angle, slope and confidence, binned into 5-degree grid cells, and used
to train per-cell classifiers on harmonic reflectance features. A synthetic
scene generator provides desk-scale inputs for the whole pipeline.
"""

__version__ = "0.1.0"
