import sys

from mixedav.cli import main

sys.exit(main())
