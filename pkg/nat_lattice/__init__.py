from nat_lattice.core import *
from nat_lattice.local_io import *
from nat_lattice.objectives_at_nat import *
from nat_lattice.ctc import *
from nat_lattice.dat import *
from nat_lattice.cmlm import *
from nat_lattice.mgmo import *
from nat_lattice.metrics import *
from nat_lattice.perturb import *
from nat_lattice.toymodel import *
from nat_lattice.train import *
from nat_lattice.visualize import *
