//! Holds the workspace acceptance target under `tests/`.
