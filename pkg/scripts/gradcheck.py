"""Float64 finite-difference check on random toy instances (thin wrapper over the CLI)."""
import sys

from rungnn.cli import main

sys.exit(main(["gradcheck", "--instances", "10", "--random-configs", *sys.argv[1:]]))
