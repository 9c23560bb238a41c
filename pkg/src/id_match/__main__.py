import sys

from id_match.cli import main

sys.exit(main())
