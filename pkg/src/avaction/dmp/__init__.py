"""Dynamic movement primitives and the simulated kitchen they execute in."""

from avaction.dmp.kitchen import *  # noqa: F401,F403
from avaction.dmp.primitive import *  # noqa: F401,F403
