"""Environment-aware TTS pipeline at desk scale."""
