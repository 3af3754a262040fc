#!/usr/bin/env python3

name = "fusemerge"

from .fusemerge import *
