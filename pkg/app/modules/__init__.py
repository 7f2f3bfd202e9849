import logging
import os
import sys
import threading

from dotenv import load_dotenv  # type: ignore
from mcp.server.fastmcp import FastMCP  # type: ignore

# Load environment variables from .env file
load_dotenv()

logger = logging.getLogger(__name__)

# Initialize FastMCP server
mcp = FastMCP("map-metadata")

# Cached geocoder shared by every tool and worker thread
geocoder = None
geocoder_key = None
_geocoder_lock = threading.Lock()


def env_flag(name: str) -> bool:
    """True when the variable is 1, true or yes (case insensitive)."""
    return os.environ.get(name, "").strip().lower() in ("1", "true", "yes")


def configure_logging(debug: bool = False) -> None:
    """Send log records to stderr so stdout stays free for JSON and stdio transport."""
    logging.basicConfig(
        level=logging.DEBUG if debug or env_flag("DEBUG") else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
        force=True,
    )


def current_config():
    """Pipeline configuration from the environment (and MAPMETA_CONFIG file, if set)."""
    from app.modules.config import PipelineConfig
    return PipelineConfig.resolve(os.environ.get("MAPMETA_CONFIG") or None)


def connect_to_geocoder(config=None):
    """Return the geocoder for the configuration, reusing the cached client.

    An HTTP endpoint wins when configured; otherwise the offline gazetteer
    file is used.
    """
    global geocoder, geocoder_key
    from app.modules.geolocalizer import Gazetteer, HttpGeocoder
    from app.modules.errors import ConfigError

    config = config or current_config()
    key = (config.geocoder_url, str(config.gazetteer), config.rate_limit)
    with _geocoder_lock:
        if geocoder is not None and geocoder_key == key:
            return geocoder
        if config.geocoder_url:
            logger.info("Using HTTP geocoder at %s", config.geocoder_url)
            geocoder = HttpGeocoder(config.geocoder_url, rate_limit=config.rate_limit)
        elif config.gazetteer:
            logger.info("Using offline gazetteer %s", config.gazetteer)
            geocoder = Gazetteer.load(config.gazetteer)
        else:
            raise ConfigError("No geocoder configured: set MAPMETA_GEOCODER_URL or MAPMETA_GAZETTEER")
        geocoder_key = key
        return geocoder
