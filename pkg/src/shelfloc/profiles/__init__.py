"""Bundled configuration profiles (TOML)."""
