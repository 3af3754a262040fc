
from .utils import *
