"""Visual pre-training by masked current-frame reconstruction and future-frame
prediction, on a small numpy autodiff core."""

__version__ = "0.1.0"
