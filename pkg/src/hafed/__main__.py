import sys

from hafed.cli import main

sys.exit(main())
