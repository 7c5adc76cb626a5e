"""warpadapt: joint domain translation, stereo matching and optical flow
co-training on a self-contained reverse-mode autodiff core."""

__version__ = "0.1.0"
