"""Shared 256-token vocabulary for the environment, policy and compressor.

Ids are dense in [0, 256). Reserved control ids sit at the bottom; the rest
are content ranges (screens, widgets, kinds, values, texts, targets, apps).
"""

from __future__ import annotations

from .errors import ConfigError

VOCAB_SIZE = 256

PAD = 0
SEP = 1
MASK = 2
ACT_BOS = 3
OUT_SUCC = 4
OUT_FAIL = 5
OUT_UNK = 6
CLICK = 7
TYPE = 8
SCROLL = 9
BACK = 10
STOP = 11
DIR_UP = 12
DIR_DOWN = 13
FAM_FILL = 14
FAM_GOTO = 15
FAM_PRESS = 16

SCREEN_BASE, N_SCREENS = 17, 16
WID_BASE, N_WIDGET_IDS = 33, 32
KIND_BASE = 65  # button, field, list-item, label
KIND_BUTTON, KIND_FIELD, KIND_ITEM, KIND_LABEL = 65, 66, 67, 68
VAL_BASE, N_VALUES = 69, 32
TXT_BASE, N_TEXTS = 101, 48
TGT_BASE, N_TARGETS = 149, 16
APP_BASE, N_APPS = 165, 80
WORD_BASE, N_WORDS = 245, 11

RESERVED_IDS = frozenset(range(SCREEN_BASE))
ACTION_TYPE_IDS = (CLICK, TYPE, SCROLL, BACK, STOP)
OUTCOME_TOKEN = {"succ": OUT_SUCC, "fail": OUT_FAIL, None: OUT_UNK}


def screen_token(i: int) -> int:
    if not 0 <= i < N_SCREENS:
        raise ConfigError(f"screen index {i} out of range")
    return SCREEN_BASE + i


def widget_token(i: int) -> int:
    if not 0 <= i < N_WIDGET_IDS:
        raise ConfigError(f"widget id {i} out of range")
    return WID_BASE + i


def value_token(i: int) -> int:
    if not 0 <= i < N_VALUES:
        raise ConfigError(f"value index {i} out of range")
    return VAL_BASE + i


def text_token(i: int) -> int:
    if not 0 <= i < N_TEXTS:
        raise ConfigError(f"text index {i} out of range")
    return TXT_BASE + i


def target_token(i: int) -> int:
    if not 0 <= i < N_TARGETS:
        raise ConfigError(f"target index {i} out of range")
    return TGT_BASE + i


def app_token(i: int) -> int:
    if not 0 <= i < N_APPS:
        raise ConfigError(f"app index {i} out of range")
    return APP_BASE + i


def is_widget_token(tok: int) -> bool:
    return WID_BASE <= tok < WID_BASE + N_WIDGET_IDS


def widget_id_of(tok: int) -> int:
    return tok - WID_BASE


def symbol(tok: int) -> str:
    """Human-readable name for a token id."""
    names = {
        PAD: "PAD",
        SEP: "SEP",
        MASK: "MASK",
        ACT_BOS: "ACT_BOS",
        OUT_SUCC: "OUT_SUCC",
        OUT_FAIL: "OUT_FAIL",
        OUT_UNK: "OUT_UNK",
        CLICK: "CLICK",
        TYPE: "TYPE",
        SCROLL: "SCROLL",
        BACK: "BACK",
        STOP: "STOP",
        DIR_UP: "DIR_UP",
        DIR_DOWN: "DIR_DOWN",
        FAM_FILL: "FAM_FILL",
        FAM_GOTO: "FAM_GOTO",
        FAM_PRESS: "FAM_PRESS",
    }
    if tok in names:
        return names[tok]
    for base, count, tag in (
        (SCREEN_BASE, N_SCREENS, "SCR"),
        (WID_BASE, N_WIDGET_IDS, "WID"),
        (KIND_BASE, 4, "KIND"),
        (VAL_BASE, N_VALUES, "VAL"),
        (TXT_BASE, N_TEXTS, "TXT"),
        (TGT_BASE, N_TARGETS, "TGT"),
        (APP_BASE, N_APPS, "APP"),
        (WORD_BASE, N_WORDS, "WORD"),
    ):
        if base <= tok < base + count:
            return f"{tag}_{tok - base}"
    raise ConfigError(f"token id {tok} outside vocabulary")


def symbol_table() -> dict[int, str]:
    return {i: symbol(i) for i in range(VOCAB_SIZE)}
