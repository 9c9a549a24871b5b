from .client import ServerClient, parse_address
from .server import FeatureSink, ModelServer, ServerHandle, serve

__all__ = ["FeatureSink", "ModelServer", "ServerClient", "ServerHandle", "parse_address", "serve"]
