import sys

from deshadow.cli import main

sys.exit(main())
