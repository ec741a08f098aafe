import sys

from echo_lab.cli import main

sys.exit(main())
