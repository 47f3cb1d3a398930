"""Free-terminal-time trajectory optimization and policy distillation for
torque-controlled manipulators."""

__version__ = "0.1.0"
