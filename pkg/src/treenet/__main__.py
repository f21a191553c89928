import sys

from treenet.cli import main

sys.exit(main())
