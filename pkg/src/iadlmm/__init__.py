"""Expert-guided multimodal anomaly detection at desk scale."""

__version__ = "0.1.0"
CODE_VERSION = f"iadlmm-{__version__}"
