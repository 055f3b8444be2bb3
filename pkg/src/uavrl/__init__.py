"""Flying-wing UAV attitude-control lab: 6-DOF sim, RL training, PID baseline."""

__version__ = "0.1.0"
