from __future__ import annotations

import sys

from filterank.cli import main

sys.exit(main())
