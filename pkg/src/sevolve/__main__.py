import sys

from sevolve.cli import main

sys.exit(main())
