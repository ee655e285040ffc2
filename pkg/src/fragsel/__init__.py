from importlib import metadata

try:
    __version__ = metadata.version("fragsel").split("+")[0]
except metadata.PackageNotFoundError:
    __version__ = "0.0.0"
