import sys

from .cli_bench.main import main

sys.exit(main())
