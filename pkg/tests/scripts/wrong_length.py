#!/usr/bin/env python3
"""Write an output one sample shorter than the input."""
import sys

from haloscope.io import read_container, write_container

x = read_container(sys.argv[1])[0]
write_container(sys.argv[2], [x.millivolts()[:-1].astype("f4")], sample_rate=x.sample_rate)
