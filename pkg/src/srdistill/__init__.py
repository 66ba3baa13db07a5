"""Distance-distillation toolkit for adapting super-resolution models to
unlabeled degradation domains: synthetic degradation pipelines, specialist/
generalist training, distillation objectives, and Y-channel evaluation."""

__version__ = "0.1.0"
