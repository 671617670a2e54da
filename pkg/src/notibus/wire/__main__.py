"""``python3 -m notibus.wire`` runs the broker, same as ``notibusd``."""

import sys

from .server import main

sys.exit(main())
