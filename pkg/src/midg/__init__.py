"""Domain-generalizing multimodal sentiment regression with an expert mixture
and a cross-modal adapter, on a small numpy autodiff engine."""

__version__ = "0.1.0"
