"""Banded versus dense solver table at the default desk-scale settings.

Equivalent to ``whitlayer bench``; kept as a script for runs outside the CLI.
"""

import sys

from whitlayer.cli import main

if __name__ == '__main__':
    sys.exit(main(['bench'] + sys.argv[1:]))
