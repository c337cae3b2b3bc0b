"""Per-teacher assessment gaps from matched teacher-graded and blind scores,
empirical Bayes denoising, IAT scoring and long-run effect regressions."""

__version__ = "0.1.0"
