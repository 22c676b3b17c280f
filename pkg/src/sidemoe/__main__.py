import sys

from sidemoe.cli import main

sys.exit(main())
