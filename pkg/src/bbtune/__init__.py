"""Black-box prompt tuning: CMA-ES in a random subspace, driven through a budgeted inference API."""

__version__ = "0.1.0"
