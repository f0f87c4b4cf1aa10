"""Allow running as: python -m lidnet <command>"""
import sys
from lidnet.cli import main

sys.exit(main())
