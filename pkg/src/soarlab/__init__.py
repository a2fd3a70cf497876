"""soarlab: trajectory-bias-corrected post-training for rectified flows, desk scale."""

__version__ = "0.1.0"
