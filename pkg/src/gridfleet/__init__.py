"""gridfleet: multi-agent grid-road fleet simulator with experience-sharing
learning MPC controllers."""

__version__ = "0.1.0"
