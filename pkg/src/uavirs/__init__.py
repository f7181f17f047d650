"""Multi-IRS UAV downlink NOMA simulator: association learning, trajectory and power optimization."""

__version__ = "0.1.0"
