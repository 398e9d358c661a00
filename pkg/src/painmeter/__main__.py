import sys

from painmeter.cli import main

sys.exit(main())
