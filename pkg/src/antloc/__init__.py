"""3D landmark localization: registration, heatmap matching and DSNT."""

__version__ = "0.1.0"
