"""Allow `python -m lfr_tabular`."""

import sys

from lfr_tabular.cli import main

sys.exit(main())
