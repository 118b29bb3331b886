from .logger import logger
from .models import CONSTS
from .cli import parse_and_dispatch
from .retrieval import retrieve, select_best
from .train import train_loop

__all__ = ["logger", "CONSTS", "parse_and_dispatch", "retrieve", "select_best", "train_loop"
           ]
