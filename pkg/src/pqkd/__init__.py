"""Knowledge distillation into dictionary-compressed CNNs conditioned by a simulated photonic sampler."""

__version__ = "0.1.0"
