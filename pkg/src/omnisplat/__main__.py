import sys

from omnisplat.cli import main

sys.exit(main())
