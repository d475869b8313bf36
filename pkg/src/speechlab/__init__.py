"""speechlab: desk-scale continuous vs. discrete speech tokenizer laboratory."""

__version__ = "0.1.0"

CONFIG_SCHEMA_VERSION = 1
