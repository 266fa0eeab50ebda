"""flowc: compile ODE flow maps into width-d leaky-ReLU feedforward networks."""

__version__ = "0.1.0"
