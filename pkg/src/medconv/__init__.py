"""Long-tailed 3D bone-density classification on a numpy autodiff core."""

__version__ = "0.1.0"
