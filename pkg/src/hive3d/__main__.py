import sys

from hive3d.cli import main

sys.exit(main())
