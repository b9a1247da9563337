from .app import create_app, create_app_from_weights
from .store import SessionStore

__all__ = ["create_app", "create_app_from_weights", "SessionStore"]
