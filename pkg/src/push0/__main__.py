import sys

from push0.cli import main

sys.exit(main())
