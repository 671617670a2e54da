"""In-process broker: every service of one notibus instance behind one object.

The network server in :mod:`notibus.wire.server` wraps a :class:`Broker`;
tests and embedded users can drive it directly.
"""

from __future__ import annotations

import logging
import os

from .channel import ChannelService
from .naming import NamingService, RefKind, ServiceRef
from .notifylog import LogService
from .property import PropertyService

log = logging.getLogger(__name__)

FACTORY_NAME = ("services", "notify", "factory")
LOG_SERVICE_NAME = ("services", "log")
PROPERTY_SERVICE_NAME = ("services", "properties")

FACTORY_REF = ServiceRef(RefKind.CHANNEL_FACTORY, "notify")
LOG_SERVICE_REF = ServiceRef(RefKind.LOG, "service")
PROPERTY_SERVICE_REF = ServiceRef(RefKind.PROPERTY_SET, "service")


class Broker:
    def __init__(self, data_dir: str | os.PathLike | None = None, fsync: bool = True):
        self.data_dir = data_dir
        self.channels = ChannelService()
        self.naming = NamingService()
        self.properties = PropertyService(data_dir, fsync=fsync)
        self.logs = LogService(self.channels, data_dir, fsync=fsync)
        self._register_services()

    def _register_services(self) -> None:
        for ctx in (("services",), ("services", "notify")):
            self.naming.bind_new_context(ctx)
        self.naming.rebind(FACTORY_NAME, FACTORY_REF)
        self.naming.rebind(LOG_SERVICE_NAME, LOG_SERVICE_REF)
        self.naming.rebind(PROPERTY_SERVICE_NAME, PROPERTY_SERVICE_REF)
        log.debug("registered service names")

    def close(self) -> None:
        self.logs.close()
