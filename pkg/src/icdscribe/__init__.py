"""Far-field speech to ICD-10 code transcription pipeline."""

__version__ = "0.1.0"
