import sys

from rfest.cli import main

sys.exit(main())
