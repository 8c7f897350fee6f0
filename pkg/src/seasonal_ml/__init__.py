"""Statistical seasonal precipitation forecasting from climate indices.

EOF-reduced precipitation loadings are predicted with a multi-task
elastic net and turned into gridded tercile probabilities.
"""

__version__ = "0.1.0"
