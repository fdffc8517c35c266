"""Graph modes: which of the three graphs a model function is asked to build."""

import enum


class Mode(str, enum.Enum):
    TRAIN = "train"
    EVAL = "eval"
    PREDICT = "predict"
