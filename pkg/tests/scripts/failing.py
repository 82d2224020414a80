#!/usr/bin/env python3
"""Exit with status 7 after writing a diagnostic."""
import sys

sys.stderr.write("model weights missing\n")
sys.exit(7)
