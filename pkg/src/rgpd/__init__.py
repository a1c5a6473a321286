"""Graph-recurrent prognostics with physics residuals and learned loss weights."""

__version__ = "0.1.0"
