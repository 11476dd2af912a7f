from enum import IntEnum


class Modality(IntEnum):
    IMAGE = 0
    TEXT = 1
    PAD = 2
